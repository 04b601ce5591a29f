"""Inpainting job bundles and the persistent render queue."""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
import uuid
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping

from .errors import StageError
from .render import FrameSequence, load_frames, load_manifest, write_frames
from .staging import Scene

logger = logging.getLogger(__name__)

LOG_NAME = "queue_log.jsonl"
DEFAULT_MAX_ATTEMPTS = 5
DEFAULT_BACKOFF_BASE_S = 0.5

#: Sampling parameters handed through to the generation backend untouched.
DEFAULT_SAMPLING: dict[str, Any] = {
    "steps": 6,
    "guidance": 1.0,
    "shift": 5,
    "upscale": True,
}


class EmptyPromptError(StageError):
    """Bundle has no scene prompt."""


class SequenceMismatchError(StageError):
    """Bundle sequences disagree on rate/shape/count."""


class BackendUnreachable(StageError):
    """Generation backend cannot be reached; submission should retry."""


class IllegalTransitionError(StageError):
    """Job state machine asked to take an edge that does not exist."""


class UnknownJobError(StageError):
    """Queue has no record of the requested job id."""


@dataclass(frozen=True)
class SequenceRef:
    """Pointer to an on-disk frame sequence plus its manifest facts."""

    path: Path
    fps: float
    resolution: tuple[int, int]
    count: int
    channels: str
    content_hash: str

    @classmethod
    def from_dir(cls, directory: str | Path) -> "SequenceRef":
        directory = Path(directory)
        manifest = load_manifest(directory)
        return cls(
            path=directory,
            fps=float(manifest["fps"]),
            resolution=(int(manifest["resolution"][0]), int(manifest["resolution"][1])),
            count=int(manifest["count"]),
            channels=str(manifest["channels"]),
            content_hash=str(manifest["content_hash"]),
        )


@dataclass(frozen=True)
class MaskInput:
    """One inpainting target: mask sequence, prompt text, optional reference."""

    sequence: SequenceRef
    prompt_fragment: str
    reference_image: Path | None = None


@dataclass(frozen=True)
class JobBundle:
    """Everything a generation backend needs for one job.

    bundle_id is a content hash: identical inputs produce identical ids no
    matter where the sequences live on disk.
    """

    background: SequenceRef
    masks: tuple[MaskInput, ...]
    scene_prompt: str
    sampling_config: Mapping[str, Any]
    bundle_id: str


def _reference_hash(path: Path | None) -> str | None:
    if path is None:
        return None
    return "sha256:" + hashlib.sha256(path.read_bytes()).hexdigest()


def canonical_bundle_payload(
    background: SequenceRef,
    masks: tuple[MaskInput, ...],
    scene_prompt: str,
    sampling_config: Mapping[str, Any],
) -> dict[str, Any]:
    return {
        "background": background.content_hash,
        "masks": [
            {
                "mask": m.sequence.content_hash,
                "prompt_fragment": m.prompt_fragment,
                "reference_image": _reference_hash(m.reference_image),
            }
            for m in masks
        ],
        "scene_prompt": scene_prompt,
        "sampling_config": dict(sorted(sampling_config.items())),
    }


def build_bundle(
    scene: Scene,
    background_dir: str | Path,
    mask_inputs: list[tuple[str | Path, str, str | Path | None]],
    sampling_overrides: Mapping[str, Any] | None = None,
) -> JobBundle:
    """Assemble and validate a JobBundle from on-disk sequences.

    mask_inputs are (mask directory, prompt fragment, optional reference
    image path) triples, one per actor, in actor order.

    :raises EmptyPromptError: scene has no scene_prompt
    :raises SequenceMismatchError: sequence rate/shape/count disagreement,
        or no masks at all
    """
    if not scene.scene_prompt.strip():
        raise EmptyPromptError("scene_prompt must be non-empty")
    if not mask_inputs:
        raise SequenceMismatchError("a bundle needs at least one mask sequence")
    background = SequenceRef.from_dir(background_dir)
    if background.channels != "rgb":
        raise SequenceMismatchError("background sequence must be RGB")
    masks = []
    for mask_dir, fragment, reference in mask_inputs:
        ref = SequenceRef.from_dir(mask_dir)
        if ref.channels != "rgba":
            raise SequenceMismatchError(f"mask sequence {mask_dir} must be RGBA")
        if (ref.fps, ref.resolution, ref.count) != (
            background.fps,
            background.resolution,
            background.count,
        ):
            raise SequenceMismatchError(
                f"mask sequence {mask_dir} does not match the background "
                f"({ref.fps} fps {ref.resolution} x{ref.count} vs "
                f"{background.fps} fps {background.resolution} x{background.count})"
            )
        masks.append(
            MaskInput(ref, fragment, None if reference is None else Path(reference))
        )
    sampling = dict(DEFAULT_SAMPLING)
    if sampling_overrides:
        sampling.update(sampling_overrides)
    payload = canonical_bundle_payload(background, tuple(masks), scene.scene_prompt, sampling)
    bundle_id = hashlib.sha256(
        json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()
    return JobBundle(
        background=background,
        masks=tuple(masks),
        scene_prompt=scene.scene_prompt,
        sampling_config=sampling,
        bundle_id=bundle_id,
    )


def bundle_to_dict(bundle: JobBundle) -> dict[str, Any]:
    return {
        "bundle_id": bundle.bundle_id,
        "background": str(bundle.background.path),
        "masks": [
            {
                "path": str(m.sequence.path),
                "prompt_fragment": m.prompt_fragment,
                "reference_image": None if m.reference_image is None else str(m.reference_image),
            }
            for m in bundle.masks
        ],
        "scene_prompt": bundle.scene_prompt,
        "sampling_config": dict(bundle.sampling_config),
    }


def bundle_from_dict(payload: dict[str, Any]) -> JobBundle:
    background = SequenceRef.from_dir(payload["background"])
    masks = tuple(
        MaskInput(
            sequence=SequenceRef.from_dir(m["path"]),
            prompt_fragment=m["prompt_fragment"],
            reference_image=None if m["reference_image"] is None else Path(m["reference_image"]),
        )
        for m in payload["masks"]
    )
    return JobBundle(
        background=background,
        masks=masks,
        scene_prompt=payload["scene_prompt"],
        sampling_config=payload["sampling_config"],
        bundle_id=payload["bundle_id"],
    )


class JobState(Enum):
    PENDING = "pending"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"


LEGAL_TRANSITIONS: dict[JobState, frozenset[JobState]] = {
    JobState.PENDING: frozenset({JobState.RUNNING, JobState.FAILED}),
    JobState.RUNNING: frozenset({JobState.DONE, JobState.FAILED}),
    JobState.DONE: frozenset(),
    JobState.FAILED: frozenset(),
}


def check_transition(current: JobState, target: JobState) -> None:
    """:raises IllegalTransitionError: the edge is not in the state machine."""
    if target not in LEGAL_TRANSITIONS[current]:
        raise IllegalTransitionError(f"cannot move {current.value} -> {target.value}")


@dataclass(frozen=True)
class SubJobSnapshot:
    index: int
    state: JobState
    started_at: float | None = None
    finished_at: float | None = None


@dataclass(frozen=True)
class JobSnapshot:
    """Immutable view of a job; poll() hands these out without locking."""

    job_id: str
    state: JobState
    bundle_id: str | None
    masks: tuple[SubJobSnapshot, ...]
    attempts: int = 0
    error: str | None = None
    result_dir: Path | None = None
    submitted_at: float | None = None
    started_at: float | None = None
    finished_at: float | None = None


class _Job:
    """Mutable queue-internal job record."""

    def __init__(self, job_id: str, bundle: JobBundle | None, payload: dict | None):
        self.job_id = job_id
        self.bundle = bundle
        self.payload = payload  # deferred-build description, when bundle is None
        self.state = JobState.PENDING
        self.attempts = 0
        self.error: str | None = None
        self.result_dir: Path | None = None
        self.submitted_at: float | None = None
        self.started_at: float | None = None
        self.finished_at: float | None = None
        self.subs: list[SubJobSnapshot] = []

    def snapshot(self) -> JobSnapshot:
        return JobSnapshot(
            job_id=self.job_id,
            state=self.state,
            bundle_id=self.bundle.bundle_id if self.bundle is not None else None,
            masks=tuple(self.subs),
            attempts=self.attempts,
            error=self.error,
            result_dir=self.result_dir,
            submitted_at=self.submitted_at,
            started_at=self.started_at,
            finished_at=self.finished_at,
        )


BundleBuilder = Callable[[Path], JobBundle]
BuilderResolver = Callable[[dict, Path], JobBundle]


class RenderQueue:
    """FIFO job queue with an append-only event log.

    One worker thread executes jobs; per-mask sub-jobs run strictly in mask
    order, each feeding the next (the composited result of mask i becomes the
    background of mask i + 1). Backend reachability is probed while a job is
    still pending so unreachable backends leave jobs retriable.
    """

    def __init__(
        self,
        workdir: str | Path,
        backend,
        max_attempts: int = DEFAULT_MAX_ATTEMPTS,
        backoff_base_s: float = DEFAULT_BACKOFF_BASE_S,
        resolver: BuilderResolver | None = None,
    ):
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.backend = backend
        self.max_attempts = max_attempts
        self.backoff_base_s = backoff_base_s
        self.resolver = resolver
        self._log_path = self.workdir / LOG_NAME
        self._lock = threading.RLock()
        self._jobs: dict[str, _Job] = {}
        self._snapshots: dict[str, JobSnapshot] = {}
        self._builders: dict[str, BundleBuilder] = {}
        self._fifo: list[str] = []
        self._wake = threading.Condition(self._lock)
        self._worker: threading.Thread | None = None
        self._stopping = False
        self._replay()

    # ------------------------------------------------------------------ log

    def _append_event(self, event: dict) -> None:
        event = dict(event, ts=time.time())
        with self._log_path.open("a") as fh:
            fh.write(json.dumps(event) + "\n")
            fh.flush()

    def _replay(self) -> None:
        """Rebuild queue state from the event log; re-enqueue unfinished jobs.

        Every unfinished job is resumed exactly once: terminal events remove
        the job from the resume set, duplicate submissions collapse on job id.
        """
        if not self._log_path.exists():
            return
        entries: dict[str, dict] = {}
        order: list[str] = []
        for line in self._log_path.read_text().splitlines():
            if not line.strip():
                continue
            event = json.loads(line)
            job_id = event["job_id"]
            if event["event"] == "submitted":
                if job_id not in entries:
                    entries[job_id] = event
                    order.append(job_id)
            elif event["event"] == "bundle_built":
                entries.setdefault(job_id, {})["bundle_manifest"] = event["bundle_manifest"]
            elif event["event"] in ("done", "failed"):
                entries.setdefault(job_id, {})["terminal"] = event
        for job_id in order:
            record = entries[job_id]
            terminal = record.get("terminal")
            bundle = None
            payload = record.get("payload")
            if record.get("bundle_manifest"):
                try:
                    bundle = bundle_from_dict(json.loads(Path(record["bundle_manifest"]).read_text()))
                except (OSError, json.JSONDecodeError, KeyError) as exc:
                    logger.warning("job %s bundle manifest unreadable: %s", job_id, exc)
            job = _Job(job_id, bundle, payload)
            job.submitted_at = record.get("ts")
            if bundle is not None:
                job.subs = [SubJobSnapshot(i, JobState.PENDING) for i in range(len(bundle.masks))]
            if terminal is not None:
                job.state = JobState(terminal["event"])
                job.error = terminal.get("error")
                if terminal.get("result_dir"):
                    job.result_dir = Path(terminal["result_dir"])
                if job.state is JobState.DONE and bundle is not None:
                    job.subs = [
                        SubJobSnapshot(i, JobState.DONE) for i in range(len(bundle.masks))
                    ]
            self._jobs[job_id] = job
            self._snapshots[job_id] = job.snapshot()
            if terminal is None:
                if bundle is None and payload is not None and self.resolver is None:
                    self._fail_locked(job, "deferred job is not resumable without a resolver")
                else:
                    self._fifo.append(job_id)
        if self._fifo:
            logger.info("resuming %d unfinished job(s)", len(self._fifo))

    # ---------------------------------------------------------------- submit

    def submit(self, bundle: JobBundle) -> str:
        """Enqueue a prepared bundle; idempotent for active bundle ids."""
        with self._lock:
            for job in self._jobs.values():
                if (
                    job.bundle is not None
                    and job.bundle.bundle_id == bundle.bundle_id
                    and job.state in (JobState.PENDING, JobState.RUNNING)
                ):
                    return job.job_id
            job = _Job(uuid.uuid4().hex[:12], bundle, None)
            job.submitted_at = time.time()
            job.subs = [SubJobSnapshot(i, JobState.PENDING) for i in range(len(bundle.masks))]
            manifest_path = self._job_dir(job.job_id) / "bundle.json"
            manifest_path.parent.mkdir(parents=True, exist_ok=True)
            manifest_path.write_text(json.dumps(bundle_to_dict(bundle), indent=2))
            self._jobs[job.job_id] = job
            self._snapshots[job.job_id] = job.snapshot()
            self._append_event(
                {
                    "event": "submitted",
                    "job_id": job.job_id,
                    "bundle_id": bundle.bundle_id,
                    "bundle_manifest": str(manifest_path),
                }
            )
            self._fifo.append(job.job_id)
            self._wake.notify_all()
            return job.job_id

    def submit_deferred(self, payload: dict, builder: BundleBuilder) -> str:
        """Enqueue a job whose bundle is built inside the worker.

        `payload` is persisted to the event log so a resolver can rebuild the
        builder after a restart.
        """
        with self._lock:
            job = _Job(uuid.uuid4().hex[:12], None, payload)
            job.submitted_at = time.time()
            self._jobs[job.job_id] = job
            self._snapshots[job.job_id] = job.snapshot()
            self._builders[job.job_id] = builder
            self._append_event(
                {"event": "submitted", "job_id": job.job_id, "payload": payload}
            )
            self._fifo.append(job.job_id)
            self._wake.notify_all()
            return job.job_id

    # ----------------------------------------------------------------- query

    def poll(self, job_id: str) -> JobSnapshot:
        """Wait-free snapshot read."""
        try:
            return self._snapshots[job_id]
        except KeyError:
            raise UnknownJobError(f"unknown job {job_id!r}") from None

    def jobs(self) -> list[JobSnapshot]:
        with self._lock:
            return [self._snapshots[j] for j in self._jobs]

    def wait(self, job_id: str, timeout: float = 60.0) -> JobSnapshot:
        deadline = time.monotonic() + timeout
        while True:
            snap = self.poll(job_id)
            if snap.state in (JobState.DONE, JobState.FAILED):
                return snap
            if time.monotonic() >= deadline:
                raise TimeoutError(f"job {job_id} still {snap.state.value} after {timeout}s")
            time.sleep(0.01)

    # ---------------------------------------------------------------- worker

    def start(self) -> None:
        with self._lock:
            if self._worker is not None and self._worker.is_alive():
                return
            self._stopping = False
            self._worker = threading.Thread(target=self._run, name="render-queue", daemon=True)
            self._worker.start()

    def stop(self) -> None:
        with self._lock:
            self._stopping = True
            self._wake.notify_all()
        if self._worker is not None:
            self._worker.join(timeout=30.0)

    def run_until_idle(self, timeout: float = 300.0) -> None:
        """Drive the queue synchronously until every job is terminal."""
        self.start()
        deadline = time.monotonic() + timeout
        while True:
            with self._lock:
                busy = bool(self._fifo) or any(
                    j.state in (JobState.PENDING, JobState.RUNNING) for j in self._jobs.values()
                )
            if not busy:
                return
            if time.monotonic() >= deadline:
                raise TimeoutError("queue did not drain in time")
            time.sleep(0.01)

    def _job_dir(self, job_id: str) -> Path:
        return self.workdir / "jobs" / job_id

    def _transition(self, job: _Job, target: JobState, **log_extra) -> None:
        with self._lock:
            check_transition(job.state, target)
            job.state = target
            now = time.time()
            if target is JobState.RUNNING:
                job.started_at = now
            if target in (JobState.DONE, JobState.FAILED):
                job.finished_at = now
            self._snapshots[job.job_id] = job.snapshot()
            self._append_event({"event": target.value, "job_id": job.job_id, **log_extra})

    def _set_sub(self, job: _Job, index: int, state: JobState) -> None:
        with self._lock:
            previous = job.subs[index]
            check_transition(previous.state, state)
            now = time.time()
            job.subs[index] = SubJobSnapshot(
                index=index,
                state=state,
                started_at=now if state is JobState.RUNNING else previous.started_at,
                finished_at=now if state in (JobState.DONE, JobState.FAILED) else None,
            )
            self._snapshots[job.job_id] = job.snapshot()
            self._append_event(
                {"event": f"mask_{state.value}", "job_id": job.job_id, "mask_index": index}
            )

    def _fail_locked(self, job: _Job, error: str) -> None:
        job.state = JobState.FAILED
        job.error = error
        job.finished_at = time.time()
        self._snapshots[job.job_id] = job.snapshot()
        self._append_event({"event": "failed", "job_id": job.job_id, "error": error})

    def _run(self) -> None:
        while True:
            with self._lock:
                while not self._fifo and not self._stopping:
                    self._wake.wait(timeout=0.5)
                if self._stopping:
                    return
                job = self._jobs[self._fifo.pop(0)]
            try:
                self._execute(job)
            except Exception as exc:  # defensive: the worker must survive
                logger.exception("job %s crashed", job.job_id)
                with self._lock:
                    if job.state in (JobState.PENDING, JobState.RUNNING):
                        job.error = str(exc)
                        job.state = JobState.FAILED
                        job.finished_at = time.time()
                        self._snapshots[job.job_id] = job.snapshot()
                        self._append_event(
                            {"event": "failed", "job_id": job.job_id, "error": str(exc)}
                        )

    def _backend_ready(self, job: _Job) -> bool:
        """Probe reachability while the job stays pending; cap retries."""
        while True:
            try:
                self.backend.ping()
                return True
            except BackendUnreachable as exc:
                with self._lock:
                    job.attempts += 1
                    attempts = job.attempts
                    self._snapshots[job.job_id] = job.snapshot()
                    self._append_event(
                        {"event": "retry", "job_id": job.job_id, "attempt": attempts}
                    )
                if attempts >= self.max_attempts:
                    with self._lock:
                        job.error = str(exc)
                        self._transition(job, JobState.FAILED, error=str(exc))
                    return False
                delay = self.backoff_base_s * 2 ** (attempts - 1)
                logger.info(
                    "backend unreachable for job %s (attempt %d); retrying in %.2fs",
                    job.job_id,
                    attempts,
                    delay,
                )
                time.sleep(delay)

    def _execute(self, job: _Job) -> None:
        if not self._backend_ready(job):
            return
        job_dir = self._job_dir(job.job_id)
        if job.bundle is None:
            try:
                builder = self._builders.pop(job.job_id, None)
                if builder is not None:
                    bundle = builder(job_dir)
                elif self.resolver is not None and job.payload is not None:
                    bundle = self.resolver(job.payload, job_dir)
                else:
                    raise StageError("deferred job has no builder")
            except Exception as exc:
                with self._lock:
                    job.error = str(exc)
                    self._transition(job, JobState.FAILED, error=str(exc))
                return
            with self._lock:
                job.bundle = bundle
                job.subs = [
                    SubJobSnapshot(i, JobState.PENDING) for i in range(len(bundle.masks))
                ]
                manifest_path = job_dir / "bundle.json"
                manifest_path.parent.mkdir(parents=True, exist_ok=True)
                manifest_path.write_text(json.dumps(bundle_to_dict(bundle), indent=2))
                self._append_event(
                    {
                        "event": "bundle_built",
                        "job_id": job.job_id,
                        "bundle_id": bundle.bundle_id,
                        "bundle_manifest": str(manifest_path),
                    }
                )
                self._snapshots[job.job_id] = job.snapshot()
        bundle = job.bundle
        self._transition(job, JobState.RUNNING)
        try:
            frames = load_frames(bundle.background.path)
            for index, mask in enumerate(bundle.masks):
                self._set_sub(job, index, JobState.RUNNING)
                mask_frames = load_frames(mask.sequence.path)
                prompt = combine_prompts(bundle.scene_prompt, mask.prompt_fragment)
                try:
                    frames = self.backend.inpaint(
                        background=frames,
                        mask=mask_frames,
                        prompt=prompt,
                        reference_image=mask.reference_image,
                        sampling=bundle.sampling_config,
                        seed=f"{bundle.bundle_id}:{index}",
                    )
                except Exception:
                    self._set_sub(job, index, JobState.FAILED)
                    raise
                self._set_sub(job, index, JobState.DONE)
            result_dir = job_dir / "result"
            write_frames(frames, result_dir)
            with self._lock:
                job.result_dir = result_dir
                self._transition(job, JobState.DONE, result_dir=str(result_dir))
        except Exception as exc:
            with self._lock:
                job.error = str(exc)
                self._transition(job, JobState.FAILED, error=str(exc))


def combine_prompts(scene_prompt: str, fragment: str) -> str:
    fragment = fragment.strip()
    if not fragment:
        return scene_prompt
    return f"{scene_prompt.rstrip('. ')}. {fragment}"


def replay_snapshots(workdir: str | Path) -> list[JobSnapshot]:
    """Read-only view of a queue workdir (used by the CLI's jobs commands)."""
    queue = RenderQueue.__new__(RenderQueue)
    queue.workdir = Path(workdir)
    queue.backend = None
    queue.max_attempts = DEFAULT_MAX_ATTEMPTS
    queue.backoff_base_s = DEFAULT_BACKOFF_BASE_S
    queue.resolver = _never_resolve
    queue._log_path = queue.workdir / LOG_NAME
    queue._lock = threading.RLock()
    queue._jobs = {}
    queue._snapshots = {}
    queue._builders = {}
    queue._fifo = []
    queue._wake = threading.Condition(queue._lock)
    queue._worker = None
    queue._stopping = False
    queue._append_event = lambda event: None  # inspection must not mutate the log
    queue._replay()
    return [queue._snapshots[j] for j in queue._jobs]


def _never_resolve(payload: dict, job_dir: Path) -> JobBundle:
    raise StageError("read-only replay cannot build bundles")
