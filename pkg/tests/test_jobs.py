"""Render queue tests: bundles, state machine, retries, crash recovery."""

import json
import math
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from streetstage.backends import MockBackend
from streetstage.geo import EARTH_RADIUS_M, CameraPose, GeoPoint, vertical_fov_for
from streetstage.jobs import (
    DEFAULT_SAMPLING,
    LEGAL_TRANSITIONS,
    LOG_NAME,
    BackendUnreachable,
    EmptyPromptError,
    IllegalTransitionError,
    JobState,
    RenderQueue,
    SequenceMismatchError,
    UnknownJobError,
    build_bundle,
    bundle_from_dict,
    bundle_to_dict,
    check_transition,
    combine_prompts,
    replay_snapshots,
)
from streetstage.panorama import Panorama
from streetstage.render import FrameSequence, load_frames, render_background, render_masks, write_frames
from streetstage.staging import Actor, CameraKeyframe, Scene

ORIGIN = GeoPoint.from_degrees(40.0100, -105.2700)
SMALL = (32, 18)


def offset_point(east: float, north: float) -> GeoPoint:
    return GeoPoint(
        ORIGIN.latitude + north / EARTH_RADIUS_M,
        ORIGIN.longitude + east / (EARTH_RADIUS_M * math.cos(ORIGIN.latitude)),
    )


def small_scene(prompt="street scene", n_actors=2) -> Scene:
    actors = tuple(
        Actor(
            actor_id=f"a{i}",
            anchor=offset_point(-3 + 6 * i, 10),
            prompt_fragment=f"subject {i}",
        )
        for i in range(n_actors)
    )
    camera = CameraPose(
        position=ORIGIN,
        heading=0.0,
        pitch=0.0,
        horizontal_fov=math.radians(90.0),
        vertical_fov=vertical_fov_for(math.radians(90.0), *SMALL),
        height_above_ground=2.5,
    )
    return Scene(
        node_id="n1",
        camera_base=camera,
        keyframes=(CameraKeyframe(0.0, 0.0, 0.0, math.radians(90.0)),),
        actors=actors,
        duration=0.5,
        fps=8.0,
        resolution=SMALL,
        scene_prompt=prompt,
    )


def make_panorama(seed=5) -> Panorama:
    rng = np.random.default_rng(seed)
    return Panorama(
        pixels=rng.integers(0, 256, size=(64, 128, 3), dtype=np.uint8), north_offset=0.0
    )


def prepare_dirs(root, scene: Scene, pano_seed=5):
    background = render_background(scene, make_panorama(pano_seed))
    bg_dir = root / "background"
    write_frames(background, bg_dir)
    mask_inputs = []
    for actor_id, seq in render_masks(scene):
        mask_dir = root / f"mask_{actor_id}"
        write_frames(seq, mask_dir)
        fragment = next(a.prompt_fragment for a in scene.actors if a.actor_id == actor_id)
        mask_inputs.append((mask_dir, fragment, None))
    return bg_dir, mask_inputs


@pytest.fixture
def bundle_parts(tmp_path):
    scene = small_scene()
    bg_dir, mask_inputs = prepare_dirs(tmp_path, scene)
    return scene, bg_dir, mask_inputs


# ----------------------------------------------------------------- bundle


def test_bundle_id_is_path_independent(tmp_path):
    scene = small_scene()
    a_dir, a_masks = prepare_dirs(tmp_path / "a", scene)
    b_dir, b_masks = prepare_dirs(tmp_path / "b", scene)
    bundle_a = build_bundle(scene, a_dir, a_masks)
    bundle_b = build_bundle(scene, b_dir, b_masks)
    assert bundle_a.bundle_id == bundle_b.bundle_id
    assert bundle_a.background.path != bundle_b.background.path


def test_bundle_id_tracks_content(tmp_path, bundle_parts):
    scene, bg_dir, mask_inputs = bundle_parts
    base = build_bundle(scene, bg_dir, mask_inputs)
    # prompt change
    other = build_bundle(small_scene(prompt="different"), bg_dir, mask_inputs)
    assert other.bundle_id != base.bundle_id
    # sampling change
    tweaked = build_bundle(scene, bg_dir, mask_inputs, sampling_overrides={"steps": 12})
    assert tweaked.bundle_id != base.bundle_id
    # pixel change
    scene2 = small_scene()
    alt_dir, alt_masks = prepare_dirs(tmp_path / "alt", scene2, pano_seed=6)
    altered = build_bundle(scene2, alt_dir, alt_masks)
    assert altered.bundle_id != base.bundle_id
    # key order in sampling must not matter
    reordered = build_bundle(
        scene, bg_dir, mask_inputs,
        sampling_overrides=dict(reversed(list(DEFAULT_SAMPLING.items()))),
    )
    assert reordered.bundle_id == base.bundle_id


def test_bundle_reference_image_hash_participates(tmp_path, bundle_parts):
    scene, bg_dir, mask_inputs = bundle_parts
    base = build_bundle(scene, bg_dir, mask_inputs)
    ref = tmp_path / "ref.png"
    ref.write_bytes(b"ref-bytes")
    with_ref = build_bundle(
        scene, bg_dir, [(mask_inputs[0][0], mask_inputs[0][1], ref)] + mask_inputs[1:]
    )
    assert with_ref.bundle_id != base.bundle_id


def test_build_bundle_rejects_empty_prompt(bundle_parts):
    _, bg_dir, mask_inputs = bundle_parts
    with pytest.raises(EmptyPromptError):
        build_bundle(small_scene(prompt="   "), bg_dir, mask_inputs)


def test_build_bundle_rejects_missing_masks(bundle_parts):
    scene, bg_dir, _ = bundle_parts
    with pytest.raises(SequenceMismatchError):
        build_bundle(scene, bg_dir, [])


def test_build_bundle_rejects_channel_confusion(bundle_parts):
    scene, bg_dir, mask_inputs = bundle_parts
    with pytest.raises(SequenceMismatchError):
        build_bundle(scene, bg_dir, [(bg_dir, "x", None)])  # RGB where RGBA expected
    with pytest.raises(SequenceMismatchError):
        build_bundle(scene, mask_inputs[0][0], mask_inputs)  # RGBA background


def test_build_bundle_rejects_rate_mismatch(tmp_path, bundle_parts):
    scene, bg_dir, mask_inputs = bundle_parts
    wrong = load_frames(mask_inputs[0][0])
    write_frames(FrameSequence(wrong.frames, fps=99.0), tmp_path / "off_rate")
    with pytest.raises(SequenceMismatchError):
        build_bundle(scene, bg_dir, [(tmp_path / "off_rate", "x", None)])


def test_bundle_default_sampling(bundle_parts):
    scene, bg_dir, mask_inputs = bundle_parts
    bundle = build_bundle(scene, bg_dir, mask_inputs)
    assert bundle.sampling_config == {"steps": 6, "guidance": 1.0, "shift": 5, "upscale": True}
    merged = build_bundle(scene, bg_dir, mask_inputs, sampling_overrides={"steps": 4})
    assert merged.sampling_config["steps"] == 4
    assert merged.sampling_config["upscale"] is True


def test_bundle_dict_round_trip(bundle_parts):
    scene, bg_dir, mask_inputs = bundle_parts
    bundle = build_bundle(scene, bg_dir, mask_inputs)
    clone = bundle_from_dict(json.loads(json.dumps(bundle_to_dict(bundle))))
    assert clone.bundle_id == bundle.bundle_id
    assert clone.scene_prompt == bundle.scene_prompt
    assert [m.prompt_fragment for m in clone.masks] == [
        m.prompt_fragment for m in bundle.masks
    ]


# ---------------------------------------------------------- state machine


@given(
    st.sampled_from(sorted(JobState, key=lambda s: s.value)),
    st.sampled_from(sorted(JobState, key=lambda s: s.value)),
)
def test_check_transition_matches_table(current, target):
    if target in LEGAL_TRANSITIONS[current]:
        check_transition(current, target)
    else:
        with pytest.raises(IllegalTransitionError):
            check_transition(current, target)


def test_combine_prompts():
    assert combine_prompts("a street.", "a dog") == "a street. a dog"
    assert combine_prompts("a street", "") == "a street"
    assert combine_prompts("a street", "   ") == "a street"


# ------------------------------------------------------------- happy path


def test_queue_runs_bundle_to_done(tmp_path, bundle_parts):
    scene, bg_dir, mask_inputs = bundle_parts
    bundle = build_bundle(scene, bg_dir, mask_inputs)
    backend = MockBackend()
    queue = RenderQueue(tmp_path / "work", backend)
    try:
        job_id = queue.submit(bundle)
        snap = queue.poll(job_id)
        assert snap.state is JobState.PENDING
        queue.run_until_idle(timeout=30.0)
        snap = queue.poll(job_id)
        assert snap.state is JobState.DONE
        assert snap.error is None
        assert snap.result_dir is not None
        result = load_frames(snap.result_dir)
        assert result.count == scene.frame_count()
        assert result.resolution == SMALL
        # both masks ran, in order, without overlap
        assert [s.state for s in snap.masks] == [JobState.DONE, JobState.DONE]
        assert snap.masks[0].finished_at <= snap.masks[1].started_at
        # prompts combined scene prompt with each fragment
        assert [c["prompt"] for c in backend.calls] == [
            "street scene. subject 0",
            "street scene. subject 1",
        ]
        assert [c["seed"] for c in backend.calls] == [
            f"{bundle.bundle_id}:0",
            f"{bundle.bundle_id}:1",
        ]
    finally:
        queue.stop()


def test_queue_chains_mask_results(tmp_path, bundle_parts):
    """Sub-job i+1 inpaints on top of sub-job i's composited output."""
    scene, bg_dir, mask_inputs = bundle_parts
    bundle = build_bundle(scene, bg_dir, mask_inputs)
    backend = MockBackend()
    queue = RenderQueue(tmp_path / "work", backend)
    try:
        job_id = queue.submit(bundle)
        queue.run_until_idle(timeout=30.0)
        result = load_frames(queue.poll(job_id).result_dir)
    finally:
        queue.stop()
    # replaying the chain by hand gives the same frames
    frames = load_frames(bg_dir)
    replay = MockBackend()
    for index, (mask_dir, fragment, _) in enumerate(mask_inputs):
        frames = replay.inpaint(
            background=frames,
            mask=load_frames(mask_dir),
            prompt=combine_prompts(scene.scene_prompt, fragment),
            reference_image=None,
            sampling=bundle.sampling_config,
            seed=f"{bundle.bundle_id}:{index}",
        )
    assert np.array_equal(result.frames, frames.frames)


def test_queue_submit_idempotent_for_active_bundle(tmp_path, bundle_parts):
    scene, bg_dir, mask_inputs = bundle_parts
    bundle = build_bundle(scene, bg_dir, mask_inputs)
    queue = RenderQueue(tmp_path / "work", MockBackend())
    # worker not started: job stays pending, resubmission collapses
    first = queue.submit(bundle)
    second = queue.submit(bundle)
    assert first == second
    queue.run_until_idle(timeout=30.0)
    queue.stop()
    # after the job finished, the same bundle may be resubmitted
    third = queue.submit(bundle)
    assert third != first


def test_queue_poll_unknown_job(tmp_path):
    queue = RenderQueue(tmp_path / "work", MockBackend())
    with pytest.raises(UnknownJobError):
        queue.poll("nope")


# ---------------------------------------------------------------- retries


def test_queue_retries_unreachable_backend(tmp_path, bundle_parts):
    scene, bg_dir, mask_inputs = bundle_parts
    bundle = build_bundle(scene, bg_dir, mask_inputs)
    backend = MockBackend(unreachable_count=2)
    queue = RenderQueue(tmp_path / "work", backend, backoff_base_s=0.01)
    try:
        job_id = queue.submit(bundle)
        queue.run_until_idle(timeout=30.0)
        snap = queue.poll(job_id)
        assert snap.state is JobState.DONE
        assert snap.attempts == 2
        assert backend.ping_calls == 3
    finally:
        queue.stop()


def test_queue_fails_after_attempt_cap(tmp_path, bundle_parts):
    scene, bg_dir, mask_inputs = bundle_parts
    bundle = build_bundle(scene, bg_dir, mask_inputs)
    backend = MockBackend(unreachable_count=100)
    queue = RenderQueue(tmp_path / "work", backend, max_attempts=3, backoff_base_s=0.01)
    try:
        job_id = queue.submit(bundle)
        queue.run_until_idle(timeout=30.0)
        snap = queue.poll(job_id)
        assert snap.state is JobState.FAILED
        assert snap.attempts == 3
        assert "unreachable" in snap.error
        # no sub-job ever started
        assert all(s.state is JobState.PENDING for s in snap.masks)
    finally:
        queue.stop()


def test_queue_keeps_finished_subs_on_later_failure(tmp_path, bundle_parts):
    scene, bg_dir, mask_inputs = bundle_parts
    bundle = build_bundle(scene, bg_dir, mask_inputs)

    class SecondMaskFails(MockBackend):
        def inpaint(self, **kwargs):
            if len(self.calls) == 1:
                self.calls.append({"seed": kwargs["seed"]})
                raise RuntimeError("mid-job explosion")
            return super().inpaint(**kwargs)

    queue = RenderQueue(tmp_path / "work", SecondMaskFails())
    try:
        job_id = queue.submit(bundle)
        queue.run_until_idle(timeout=30.0)
        snap = queue.poll(job_id)
        assert snap.state is JobState.FAILED
        assert "explosion" in snap.error
        assert snap.masks[0].state is JobState.DONE
        assert snap.masks[1].state is JobState.FAILED
        assert snap.result_dir is None
    finally:
        queue.stop()


# --------------------------------------------------------- crash recovery


def test_queue_resumes_pending_jobs_exactly_once(tmp_path, bundle_parts):
    scene, bg_dir, mask_inputs = bundle_parts
    bundle = build_bundle(scene, bg_dir, mask_inputs)
    cold = RenderQueue(tmp_path / "work", MockBackend())
    job_id = cold.submit(bundle)  # worker never started: simulated crash
    del cold

    backend = MockBackend()
    queue = RenderQueue(tmp_path / "work", backend)
    try:
        snap = queue.poll(job_id)  # job survived the restart
        assert snap.state is JobState.PENDING
        queue.run_until_idle(timeout=30.0)
        assert queue.poll(job_id).state is JobState.DONE
        assert len(backend.calls) == len(mask_inputs)  # ran exactly once
    finally:
        queue.stop()


def test_queue_does_not_rerun_terminal_jobs(tmp_path, bundle_parts):
    scene, bg_dir, mask_inputs = bundle_parts
    bundle = build_bundle(scene, bg_dir, mask_inputs)
    first = RenderQueue(tmp_path / "work", MockBackend())
    job_id = first.submit(bundle)
    first.run_until_idle(timeout=30.0)
    first.stop()

    backend = MockBackend()
    queue = RenderQueue(tmp_path / "work", backend)
    try:
        queue.run_until_idle(timeout=30.0)
        snap = queue.poll(job_id)
        assert snap.state is JobState.DONE
        assert snap.result_dir is not None
        assert backend.calls == []  # nothing re-executed
        assert backend.ping_calls == 0
    finally:
        queue.stop()


def test_queue_resumes_deferred_with_resolver(tmp_path):
    scene = small_scene()
    payload = {"kind": "test-scene"}
    builds = []

    def resolver(raw_payload, job_dir):
        assert raw_payload == payload
        bg_dir, mask_inputs = prepare_dirs(job_dir, scene)
        builds.append(raw_payload)
        return build_bundle(scene, bg_dir, mask_inputs)

    cold = RenderQueue(tmp_path / "work", MockBackend(), resolver=resolver)
    job_id = cold.submit_deferred(payload, lambda job_dir: resolver(payload, job_dir))
    del cold  # crash before the worker ever ran

    queue = RenderQueue(tmp_path / "work", MockBackend(), resolver=resolver)
    try:
        queue.run_until_idle(timeout=30.0)
        snap = queue.poll(job_id)
        assert snap.state is JobState.DONE
        assert snap.bundle_id is not None
        assert len(builds) == 1  # built during resume only
    finally:
        queue.stop()


def test_queue_fails_unresumable_deferred_without_resolver(tmp_path):
    scene = small_scene()

    def builder(job_dir):
        bg_dir, mask_inputs = prepare_dirs(job_dir, scene)
        return build_bundle(scene, bg_dir, mask_inputs)

    cold = RenderQueue(tmp_path / "work", MockBackend())
    job_id = cold.submit_deferred({"kind": "x"}, builder)
    del cold

    queue = RenderQueue(tmp_path / "work", MockBackend())  # no resolver
    try:
        snap = queue.poll(job_id)
        assert snap.state is JobState.FAILED
        assert "resolver" in snap.error
    finally:
        queue.stop()


def test_queue_resume_skips_rebuilt_bundles(tmp_path):
    """A deferred job that crashed after bundle_built resumes from the bundle."""
    scene = small_scene()
    builds = []

    def resolver(payload, job_dir):
        builds.append(payload)
        bg_dir, mask_inputs = prepare_dirs(job_dir, scene)
        return build_bundle(scene, bg_dir, mask_inputs)

    class ExplodingBackend(MockBackend):
        def inpaint(self, **kwargs):
            raise RuntimeError("power cut")

    first = RenderQueue(tmp_path / "work", ExplodingBackend(), resolver=resolver)
    job_id = first.submit_deferred({"k": 1}, lambda d: resolver({"k": 1}, d))
    first.run_until_idle(timeout=30.0)
    first.stop()
    assert first.poll(job_id).state is JobState.FAILED
    assert len(builds) == 1

    # fake a crash-before-terminal by rewriting the log without the failure
    log = tmp_path / "work" / LOG_NAME
    kept = [
        line
        for line in log.read_text().splitlines()
        if json.loads(line)["event"] not in ("failed", "done")
    ]
    log.write_text("\n".join(kept) + "\n")

    queue = RenderQueue(tmp_path / "work", MockBackend(), resolver=resolver)
    try:
        queue.run_until_idle(timeout=30.0)
        snap = queue.poll(job_id)
        assert snap.state is JobState.DONE
        assert len(builds) == 1  # bundle manifest reused, resolver not called again
    finally:
        queue.stop()


# ----------------------------------------------------------------- replay


def test_replay_snapshots_is_read_only(tmp_path, bundle_parts):
    scene, bg_dir, mask_inputs = bundle_parts
    bundle = build_bundle(scene, bg_dir, mask_inputs)
    queue = RenderQueue(tmp_path / "work", MockBackend())
    job_id = queue.submit(bundle)
    queue.run_until_idle(timeout=30.0)
    queue.stop()
    log = tmp_path / "work" / LOG_NAME
    before = log.read_text()
    snaps = replay_snapshots(tmp_path / "work")
    assert log.read_text() == before
    assert [s.job_id for s in snaps] == [job_id]
    assert snaps[0].state is JobState.DONE


def test_poll_is_wait_free_under_execution(tmp_path, bundle_parts):
    """Readers never observe an illegal state while the worker mutates."""
    scene, bg_dir, mask_inputs = bundle_parts
    bundle = build_bundle(scene, bg_dir, mask_inputs)
    queue = RenderQueue(tmp_path / "work", MockBackend(latency_s=0.02))
    job_id = queue.submit(bundle)
    streams: list[list[JobState]] = [[] for _ in range(4)]
    stop = threading.Event()

    def reader(stream: list[JobState]):
        while not stop.is_set():
            stream.append(queue.poll(job_id).state)

    threads = [threading.Thread(target=reader, args=(s,)) for s in streams]
    for t in threads:
        t.start()
    try:
        queue.run_until_idle(timeout=30.0)
    finally:
        stop.set()
        for t in threads:
            t.join()
        queue.stop()
    order = {JobState.PENDING: 0, JobState.RUNNING: 1, JobState.DONE: 2}
    for stream in streams:
        ranks = [order[s] for s in stream]
        assert ranks == sorted(ranks)  # each reader stream is monotone
        assert ranks[-1] == 2
