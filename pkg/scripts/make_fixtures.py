#!/usr/bin/env python3
"""Generate the committed offline fixture set: imagery nodes and a demo scene.

Panoramas are procedural but georeferenced: building facades, road markings,
and cardinal stripes are painted at fixed world bearings, so nodes with
different compass angles show the same street rotated by their north offset.
Everything is seeded; reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import math
from io import BytesIO
from pathlib import Path

import numpy as np
from PIL import Image

TAU = 2.0 * math.pi

# Shared street layout (world bearings, radians) used for every node.
SEGMENTS = 16


def _facade_layout(rng: np.random.Generator):
    """Random skyline: per-segment building presence, height, and color."""
    present = rng.random(SEGMENTS) > 0.3
    heights = rng.uniform(0.08, 0.42, SEGMENTS)
    colors = rng.integers(90, 200, size=(SEGMENTS, 3))
    return present, heights, colors


def synth_panorama(width: int, north_offset_rad: float, layout, seed: int) -> np.ndarray:
    height = width // 2
    rng = np.random.default_rng(seed)
    present, seg_heights, seg_colors = layout

    cols = (np.arange(width) + 0.5) / width
    rows = (np.arange(height) + 0.5) / height
    world_yaw = (north_offset_rad + cols * TAU) % TAU           # per column
    pitch = 0.5 * math.pi - rows * math.pi                       # per row, +up

    yaw = world_yaw[None, :] * np.ones((height, 1))
    pit = pitch[:, None] * np.ones((1, width))
    img = np.zeros((height, width, 3), dtype=np.float64)

    # Sky: zenith blue fading to a pale horizon.
    sky_t = np.clip(pit / (0.5 * math.pi), 0.0, 1.0) ** 0.9
    for c, (zenith, horizon) in enumerate(((58, 196), (108, 216), (190, 236))):
        img[..., c] = horizon + (zenith - horizon) * sky_t

    # Ground: asphalt darkening toward nadir, with a soft horizon haze band.
    ground = pit < 0.0
    g_t = np.clip(-pit / (0.5 * math.pi), 0.0, 1.0) ** 0.7
    for c, (far, near) in enumerate(((205, 70), (205, 72), (208, 78))):
        img[..., c] = np.where(ground, far + (near - far) * g_t, img[..., c])

    # Crosswalk stripes ahead and behind (world north/south), on the ground.
    stripe_band = (pit > -0.22) & (pit < -0.12)
    facing = np.minimum(np.abs(yaw), TAU - np.abs(yaw))
    stripes = stripe_band & (
        (facing < 0.35) | (np.abs(yaw - math.pi) < 0.35)
    ) & (np.floor(yaw / 0.05).astype(int) % 2 == 0)
    img[stripes] = (230.0, 230.0, 225.0)

    # Buildings: segment index by world bearing so the skyline is shared.
    seg = np.floor(yaw / (TAU / SEGMENTS)).astype(int) % SEGMENTS
    seg_top = seg_heights[seg]
    facade = (pit >= 0.0) & (pit < seg_top) & present[seg]
    base = seg_colors[seg].astype(np.float64)
    shade = 1.0 - 0.25 * (pit / np.maximum(seg_top, 1e-9))
    for c in range(3):
        img[..., c] = np.where(facade, base[..., c] * shade, img[..., c])

    # Window grid on facades.
    wx = (yaw % (TAU / SEGMENTS)) / (TAU / SEGMENTS)
    wy = np.clip(pit / np.maximum(seg_top, 1e-9), 0.0, 1.0)
    windows = facade & (np.mod(wx * 7.0, 1.0) < 0.45) & (np.mod(wy * 6.0, 1.0) < 0.4)
    img[windows] *= 0.45

    # Sun disk at a fixed world bearing.
    sun_yaw, sun_pitch = 4.1, 0.62
    d = np.hypot(np.minimum(np.abs(yaw - sun_yaw), TAU - np.abs(yaw - sun_yaw)), pit - sun_pitch)
    img[d < 0.045] = (255.0, 246.0, 220.0)

    # Thin cardinal stripes near the horizon: N red, E green, S blue, W yellow.
    for k, color in enumerate(((220, 40, 40), (40, 180, 60), (50, 80, 220), (230, 210, 40))):
        bearing = k * TAU / 4.0
        db = np.minimum(np.abs(yaw - bearing), TAU - np.abs(yaw - bearing))
        mark = (db < 0.01) & (np.abs(pit) < 0.10)
        img[mark] = color

    # Coarse tonal variation only: per-pixel noise would bloat the PNGs.
    block = 64
    coarse = rng.normal(0.0, 4.0, size=(height // block + 1, width // block + 1, 1))
    noise = np.repeat(np.repeat(coarse, block, axis=0), block, axis=1)[:height, :width]
    return np.clip(img + noise, 0, 255).astype(np.uint8)


def synth_flat_photo(size: tuple[int, int], seed: int) -> np.ndarray:
    """Non-panoramic filler image (plain gradient with noise)."""
    rng = np.random.default_rng(seed)
    w, h = size
    base = np.linspace(60, 200, h)[:, None, None] * np.ones((1, w, 3))
    coarse = rng.normal(0, 10, size=(h // 32 + 1, w // 32 + 1, 3))
    noise = np.repeat(np.repeat(coarse, 32, axis=0), 32, axis=1)[:h, :w]
    return np.clip(base + noise, 0, 255).astype(np.uint8)


NODES = [
    # node_id, lat, lon, compass_deg (None = unannotated), panoramic, width, capture_time
    ("pano-a", 40.01500, -105.27050, 0.0, True, 4096, "2024-05-14T16:21:00+00:00"),
    ("pano-b", 40.01505, -105.27043, 37.5, True, 2048, "2024-05-14T16:23:30+00:00"),
    ("pano-c", 40.01494, -105.27058, 292.0, True, 2048, "2024-06-02T09:10:00+00:00"),
    ("pano-d", 40.01511, -105.27036, None, True, 2048, "2024-04-20T18:05:00+00:00"),
    ("flat-a", 40.01502, -105.27046, 80.0, False, 640, "2024-07-01T12:00:00+00:00"),
    ("flat-b", 40.01497, -105.27054, 260.0, False, 640, "2024-07-01T12:02:00+00:00"),
]


def write_imagery(root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    layout = _facade_layout(np.random.default_rng(20240514))
    records = []
    for i, (node_id, lat, lon, compass, panoramic, width, captured) in enumerate(NODES):
        record = {
            "node_id": node_id,
            "lat_deg": lat,
            "lon_deg": lon,
            "is_panoramic": panoramic,
            "capture_time": captured,
        }
        if compass is not None:
            record["compass_angle_deg"] = compass
        records.append(record)
        if panoramic:
            pixels = synth_panorama(width, math.radians(compass or 0.0), layout, seed=100 + i)
        else:
            pixels = synth_flat_photo((width, width * 3 // 4), seed=100 + i)
        buf = BytesIO()
        Image.fromarray(pixels).save(buf, format="PNG", optimize=True)
        path = root / f"{node_id}.png"
        path.write_bytes(buf.getvalue())
        print(f"wrote {path} ({path.stat().st_size / 1024:.0f} KiB)")
    nodes_path = root / "nodes.json"
    nodes_path.write_text(json.dumps(records, indent=2) + "\n")
    print(f"wrote {nodes_path}")


def demo_scene() -> dict:
    """One walker crossing the street in front of pano-a while the camera pans."""
    lat0, lon0 = 40.01500, -105.27050
    radius = 6_371_008.8

    def offset(north_m: float, east_m: float) -> list[float]:
        lat = lat0 + math.degrees(north_m / radius)
        lon = lon0 + math.degrees(east_m / (radius * math.cos(math.radians(lat0))))
        return [lat, lon]

    start = offset(12.0, -8.0)
    end = offset(12.0, 8.0)
    return {
        "schema_version": 1,
        "node_id": "pano-a",
        "camera_base": {"lat_deg": lat0, "lon_deg": lon0, "height_m": 2.5},
        "keyframes": [
            {"t_s": 0.0, "heading_deg": 0.0, "pitch_deg": 0.0, "horizontal_fov_deg": 90.0},
            {"t_s": 5.0, "heading_deg": 20.0, "pitch_deg": 0.0, "horizontal_fov_deg": 90.0},
        ],
        "actors": [
            {
                "id": "walker",
                "lat_deg": start[0],
                "lon_deg": start[1],
                "width_m": 0.6,
                "height_m": 1.7,
                "prompt": "a person in a red jacket walking",
                "trajectory": {
                    "points": [start, end],
                    "start_s": 0.0,
                    "end_s": 5.0,
                },
            }
        ],
        "duration_s": 5.0,
        "fps": 16.0,
        "resolution": [1280, 720],
        "scene_prompt": "a quiet sunlit street in the morning",
    }


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", type=Path, default=Path(__file__).parent.parent / "fixtures")
    args = parser.parse_args()

    write_imagery(args.root / "imagery")
    scene_path = args.root / "demo_scene.json"
    scene_path.write_text(json.dumps(demo_scene(), indent=2) + "\n")
    print(f"wrote {scene_path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
