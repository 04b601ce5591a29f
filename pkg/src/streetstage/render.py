"""Deterministic frame rendering: backgrounds, mask cards, previews, PNG IO."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from io import BytesIO
from pathlib import Path

import numpy as np
from PIL import Image

from .panorama import Panorama, render_view
from .staging import Scene, ScreenQuad, camera_at, sample_scene

MANIFEST_NAME = "manifest.json"
FRAME_PATTERN = "frame_{:05d}.png"

#: Opaque mask fill; everything else in a mask frame is fully transparent.
MASK_RGBA = (0, 255, 0, 255)

#: PNG encode settings; low compression keeps 80-frame writes quick.
PNG_COMPRESS_LEVEL = 1


@dataclass(frozen=True)
class FrameSequence:
    """A fixed-rate stack of equally sized uint8 frames (RGB or RGBA)."""

    frames: np.ndarray
    fps: float

    def __post_init__(self) -> None:
        if self.frames.ndim != 4 or self.frames.shape[3] not in (3, 4):
            raise ValueError(f"frames must be NxHxWx(3|4), got {self.frames.shape}")
        if self.frames.dtype != np.uint8:
            raise ValueError(f"frames must be uint8, got {self.frames.dtype}")
        if self.fps <= 0.0:
            raise ValueError("fps must be positive")

    @property
    def count(self) -> int:
        return self.frames.shape[0]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[1]

    @property
    def channels(self) -> str:
        return "rgb" if self.frames.shape[3] == 3 else "rgba"

    @property
    def duration(self) -> float:
        return self.count / self.fps


def content_hash(seq: FrameSequence) -> str:
    """sha256 over the raw pixel stream plus the shape/rate header."""
    digest = hashlib.sha256()
    width, height = seq.resolution
    digest.update(
        f"{seq.count}x{width}x{height}x{seq.channels}@{seq.fps}".encode()
    )
    digest.update(np.ascontiguousarray(seq.frames).data)
    return "sha256:" + digest.hexdigest()


def render_background(scene: Scene, pano: Panorama) -> FrameSequence:
    """Background frames: one perspective extraction per frame time.

    Frames sharing an identical camera pose are rendered once and reused, so
    a static camera costs a single extraction.
    """
    cache: dict[tuple[float, float, float], np.ndarray] = {}
    frames = np.empty(
        (scene.frame_count(), scene.resolution[1], scene.resolution[0], 3), dtype=np.uint8
    )
    for k, t in enumerate(scene.frame_times()):
        camera = camera_at(scene, t)
        key = (camera.heading, camera.pitch, camera.horizontal_fov)
        if key not in cache:
            cache[key] = render_view(pano, camera, scene.resolution)
        frames[k] = cache[key]
    return FrameSequence(frames, scene.fps)


def quad_pixel_bounds(quad: ScreenQuad, screen: tuple[int, int]) -> tuple[int, int, int, int]:
    """Integer raster bounds (x0, y0, x1, y1; half-open) covered by a quad.

    A pixel belongs to the quad iff its center lies inside it; no
    anti-aliasing, so mask boundaries stay binary.
    """
    x0 = max(0, math.ceil(quad.left - 0.5))
    y0 = max(0, math.ceil(quad.top - 0.5))
    x1 = min(screen[0], math.ceil(quad.right - 0.5))
    y1 = min(screen[1], math.ceil(quad.bottom - 0.5))
    return x0, y0, max(x0, x1), max(y0, y1)


def render_masks(scene: Scene) -> list[tuple[str, FrameSequence]]:
    """Per-actor RGBA mask sequences, in actor order.

    Frames contain exactly two pixel classes: opaque green inside the actor's
    quad and fully transparent elsewhere. Actors that are behind the camera
    or fail to project yield fully transparent frames.
    """
    width, height = scene.resolution
    count = scene.frame_count()
    stacks = {
        actor.actor_id: np.zeros((count, height, width, 4), dtype=np.uint8)
        for actor in scene.actors
    }
    for k, t in enumerate(scene.frame_times()):
        for sample in sample_scene(scene, t):
            if sample.quad is None:
                continue
            x0, y0, x1, y1 = quad_pixel_bounds(sample.quad, scene.resolution)
            stacks[sample.actor_id][k, y0:y1, x0:x1] = MASK_RGBA
    return [
        (actor.actor_id, FrameSequence(stacks[actor.actor_id], scene.fps))
        for actor in scene.actors
    ]


def compose_preview(background: FrameSequence, masks: list[FrameSequence]) -> FrameSequence:
    """Alpha-over the mask sequences onto the background, in order."""
    if background.channels != "rgb":
        raise ValueError("background must be RGB")
    out = background.frames.astype(np.uint16)
    for mask in masks:
        if mask.channels != "rgba":
            raise ValueError("masks must be RGBA")
        if mask.frames.shape[:3] != background.frames.shape[:3]:
            raise ValueError("mask and background shapes differ")
        alpha = mask.frames[..., 3:4].astype(np.uint16)
        rgb = mask.frames[..., :3].astype(np.uint16)
        out = (rgb * alpha + out * (255 - alpha) + 127) // 255
    return FrameSequence(out.astype(np.uint8), background.fps)


def overlay_frame(frame: np.ndarray, quads: list[ScreenQuad]) -> np.ndarray:
    """Paint mask quads onto a single RGB frame (preview helper)."""
    height, width = frame.shape[:2]
    out = frame.copy()
    for quad in quads:
        x0, y0, x1, y1 = quad_pixel_bounds(quad, (width, height))
        out[y0:y1, x0:x1] = MASK_RGBA[:3]
    return out


def encode_png(frame: np.ndarray) -> bytes:
    buf = BytesIO()
    Image.fromarray(frame).save(buf, format="PNG", compress_level=PNG_COMPRESS_LEVEL)
    return buf.getvalue()


def write_frames(seq: FrameSequence, directory: str | Path) -> dict:
    """Write frame_%05d.png files plus a manifest; returns the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k in range(seq.count):
        (directory / FRAME_PATTERN.format(k)).write_bytes(encode_png(seq.frames[k]))
    width, height = seq.resolution
    manifest = {
        "fps": seq.fps,
        "resolution": [width, height],
        "count": seq.count,
        "channels": seq.channels,
        "content_hash": content_hash(seq),
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_manifest(directory: str | Path) -> dict:
    return json.loads((Path(directory) / MANIFEST_NAME).read_text())


def load_frames(directory: str | Path) -> FrameSequence:
    """Load a PNG frame directory back into memory, checking the manifest."""
    directory = Path(directory)
    manifest = load_manifest(directory)
    count = int(manifest["count"])
    width, height = (int(x) for x in manifest["resolution"])
    depth = 3 if manifest["channels"] == "rgb" else 4
    frames = np.empty((count, height, width, depth), dtype=np.uint8)
    for k in range(count):
        with Image.open(directory / FRAME_PATTERN.format(k)) as img:
            arr = np.asarray(img.convert("RGB" if depth == 3 else "RGBA"))
        if arr.shape != (height, width, depth):
            raise ValueError(
                f"frame {k} shape {arr.shape} does not match manifest {manifest['resolution']}"
            )
        frames[k] = arr
    seq = FrameSequence(frames, float(manifest["fps"]))
    expected = manifest.get("content_hash")
    if expected is not None and content_hash(seq) != expected:
        raise ValueError(f"frame data in {directory} does not match manifest content_hash")
    return seq
