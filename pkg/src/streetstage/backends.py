"""Generation backend clients: deterministic mock and HTTP wire client."""

from __future__ import annotations

import hashlib
import io
import json
import threading
import time
import zipfile
from pathlib import Path
from typing import Any, Mapping, Protocol

import httpx
import numpy as np

from .jobs import BackendUnreachable
from .render import FRAME_PATTERN, FrameSequence, encode_png


class BackendClient(Protocol):
    def ping(self) -> None:
        """Probe reachability; raises BackendUnreachable when down."""

    def inpaint(
        self,
        background: FrameSequence,
        mask: FrameSequence,
        prompt: str,
        reference_image: Path | None,
        sampling: Mapping[str, Any],
        seed: str,
    ) -> FrameSequence:
        """Run one mask sub-job and return the composited sequence."""


def _texture_for(seed: str, height: int, width: int) -> np.ndarray:
    """Deterministic pseudo-texture derived from a seed string."""
    digest = hashlib.sha256(seed.encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
    return rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)


class MockBackend:
    """In-process stand-in for a video inpainting service.

    Each sub-job sleeps for the configured latency and then alpha-overs a
    pseudo-texture (seeded by the caller-provided seed, i.e. bundle id plus
    mask index) into the mask region of the background. Fully deterministic
    for identical inputs.
    """

    def __init__(self, latency_s: float = 0.0, unreachable_count: int = 0):
        self.latency_s = latency_s
        self._unreachable_left = unreachable_count
        self._lock = threading.Lock()
        self.ping_calls = 0
        self.calls: list[dict[str, Any]] = []

    def ping(self) -> None:
        with self._lock:
            self.ping_calls += 1
            if self._unreachable_left > 0:
                self._unreachable_left -= 1
                raise BackendUnreachable("mock backend marked unreachable")

    def inpaint(
        self,
        background: FrameSequence,
        mask: FrameSequence,
        prompt: str,
        reference_image: Path | None,
        sampling: Mapping[str, Any],
        seed: str,
    ) -> FrameSequence:
        started = time.monotonic()
        if self.latency_s > 0.0:
            time.sleep(self.latency_s)
        width, height = background.resolution
        texture = _texture_for(seed, height, width)
        inside = mask.frames[..., 3] > 0
        out = background.frames.copy()
        out[inside] = np.broadcast_to(texture, background.frames.shape)[inside]
        with self._lock:
            self.calls.append(
                {
                    "seed": seed,
                    "prompt": prompt,
                    "sampling": dict(sampling),
                    "reference_image": None if reference_image is None else str(reference_image),
                    "started": started,
                    "finished": time.monotonic(),
                }
            )
        return FrameSequence(out, background.fps)


def _zip_sequence(seq: FrameSequence) -> bytes:
    """Pack a sequence into an in-memory zip of PNG frames plus metadata."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        width, height = seq.resolution
        zf.writestr(
            "manifest.json",
            json.dumps(
                {
                    "fps": seq.fps,
                    "resolution": [width, height],
                    "count": seq.count,
                    "channels": seq.channels,
                }
            ),
        )
        for k in range(seq.count):
            zf.writestr(FRAME_PATTERN.format(k), encode_png(seq.frames[k]))
    return buf.getvalue()


def _unzip_sequence(data: bytes) -> FrameSequence:
    from PIL import Image

    with zipfile.ZipFile(io.BytesIO(data)) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        count = int(manifest["count"])
        width, height = (int(x) for x in manifest["resolution"])
        depth = 3 if manifest["channels"] == "rgb" else 4
        frames = np.empty((count, height, width, depth), dtype=np.uint8)
        for k in range(count):
            with Image.open(io.BytesIO(zf.read(FRAME_PATTERN.format(k)))) as img:
                frames[k] = np.asarray(img.convert("RGB" if depth == 3 else "RGBA"))
    return FrameSequence(frames, float(manifest["fps"]))


class HttpBackend:
    """Client for a remote inpainting service speaking the archive protocol.

    Sub-job wire format: POST /api/v1/inpaint with a single zip body holding
    `manifest.json` (prompt, sampling, seed, fps, resolution, count),
    `background.zip` and `mask.zip` (PNG frame archives) and an optional
    `reference.bin` image; then poll GET /api/v1/inpaint/{task_id} until the
    state turns done/failed and download GET /api/v1/inpaint/{task_id}/result
    as a zip archive.
    """

    def __init__(
        self,
        base_url: str,
        token: str | None = None,
        client: httpx.Client | None = None,
        poll_interval_s: float = 0.5,
        timeout_s: float = 600.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.token = token
        self.client = client or httpx.Client(timeout=60.0)
        self.poll_interval_s = poll_interval_s
        self.timeout_s = timeout_s

    def _headers(self) -> dict[str, str]:
        if not self.token:
            return {}
        return {"Authorization": f"Bearer {self.token}"}

    def ping(self) -> None:
        try:
            response = self.client.get(f"{self.base_url}/health", headers=self._headers())
        except httpx.HTTPError as exc:
            raise BackendUnreachable(f"backend unreachable: {exc}") from exc
        if response.status_code != 200:
            raise BackendUnreachable(f"backend health returned {response.status_code}")

    def inpaint(
        self,
        background: FrameSequence,
        mask: FrameSequence,
        prompt: str,
        reference_image: Path | None,
        sampling: Mapping[str, Any],
        seed: str,
    ) -> FrameSequence:
        width, height = background.resolution
        manifest = {
            "prompt": prompt,
            "sampling": dict(sampling),
            "seed": seed,
            "fps": background.fps,
            "resolution": [width, height],
            "count": background.count,
            "has_reference": reference_image is not None,
        }
        body = io.BytesIO()
        with zipfile.ZipFile(body, "w", zipfile.ZIP_STORED) as zf:
            zf.writestr("manifest.json", json.dumps(manifest))
            zf.writestr("background.zip", _zip_sequence(background))
            zf.writestr("mask.zip", _zip_sequence(mask))
            if reference_image is not None:
                zf.writestr("reference.bin", reference_image.read_bytes())
        try:
            response = self.client.post(
                f"{self.base_url}/api/v1/inpaint",
                content=body.getvalue(),
                headers={"Content-Type": "application/zip", **self._headers()},
            )
            response.raise_for_status()
            task_id = response.json()["task_id"]
            deadline = time.monotonic() + self.timeout_s
            while True:
                status = self.client.get(
                    f"{self.base_url}/api/v1/inpaint/{task_id}", headers=self._headers()
                )
                status.raise_for_status()
                state = status.json()["state"]
                if state == "done":
                    break
                if state == "failed":
                    raise RuntimeError(
                        f"backend task {task_id} failed: {status.json().get('error')}"
                    )
                if time.monotonic() >= deadline:
                    raise TimeoutError(f"backend task {task_id} timed out")
                time.sleep(self.poll_interval_s)
            result = self.client.get(
                f"{self.base_url}/api/v1/inpaint/{task_id}/result", headers=self._headers()
            )
            result.raise_for_status()
        except httpx.HTTPError as exc:
            raise BackendUnreachable(f"backend request failed: {exc}") from exc
        return _unzip_sequence(result.content)
