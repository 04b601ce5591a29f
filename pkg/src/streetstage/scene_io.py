"""Scene file serialization (versioned JSON, degrees at the boundary)."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any

from .errors import StageError
from .geo import CameraPose, GeoPoint, vertical_fov_for
from .staging import (
    DEFAULT_ACTOR_HEIGHT_M,
    DEFAULT_ACTOR_WIDTH_M,
    DEFAULT_CAMERA_HEIGHT_M,
    DEFAULT_DURATION_S,
    DEFAULT_FPS,
    DEFAULT_RESOLUTION,
    Actor,
    CameraKeyframe,
    Scene,
    Trajectory,
)

SCHEMA_VERSION = 1


class SceneFormatError(StageError):
    """Scene file is structurally invalid."""


def scene_to_dict(scene: Scene) -> dict[str, Any]:
    base = scene.camera_base
    payload: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "node_id": scene.node_id,
        "camera_base": {
            "lat_deg": base.position.latitude_deg,
            "lon_deg": base.position.longitude_deg,
            "height_m": base.height_above_ground,
        },
        "keyframes": [
            {
                "t_s": k.time,
                "heading_deg": math.degrees(k.heading),
                "pitch_deg": math.degrees(k.pitch),
                "horizontal_fov_deg": math.degrees(k.horizontal_fov),
            }
            for k in scene.keyframes
        ],
        "actors": [_actor_to_dict(a) for a in scene.actors],
        "duration_s": scene.duration,
        "fps": scene.fps,
        "resolution": list(scene.resolution),
        "scene_prompt": scene.scene_prompt,
    }
    return payload


def _actor_to_dict(actor: Actor) -> dict[str, Any]:
    payload: dict[str, Any] = {
        "id": actor.actor_id,
        "lat_deg": actor.anchor.latitude_deg,
        "lon_deg": actor.anchor.longitude_deg,
        "width_m": actor.width,
        "height_m": actor.height,
        "prompt": actor.prompt_fragment,
        "reference_image": actor.reference_image,
        "trajectory": None,
    }
    if actor.trajectory is not None:
        payload["trajectory"] = {
            "points": [[p.latitude_deg, p.longitude_deg] for p in actor.trajectory.points],
            "start_s": actor.trajectory.start_time,
            "end_s": actor.trajectory.end_time,
        }
    return payload


def scene_from_dict(payload: dict[str, Any]) -> Scene:
    """Build a Scene from its JSON form.

    :raises SceneFormatError: missing/odd-typed fields, unknown schema version
    """
    if not isinstance(payload, dict):
        raise SceneFormatError("scene document must be a JSON object")
    version = payload.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SceneFormatError(f"unsupported schema_version {version!r}")
    try:
        base_raw = payload["camera_base"]
        position = GeoPoint.from_degrees(float(base_raw["lat_deg"]), float(base_raw["lon_deg"]))
        height = float(base_raw.get("height_m", DEFAULT_CAMERA_HEIGHT_M))
        resolution = tuple(int(x) for x in payload.get("resolution", DEFAULT_RESOLUTION))
        if len(resolution) != 2:
            raise SceneFormatError("resolution must be [width, height]")
        keyframes = tuple(
            CameraKeyframe(
                time=float(k["t_s"]),
                heading=math.radians(float(k["heading_deg"])),
                pitch=math.radians(float(k.get("pitch_deg", 0.0))),
                horizontal_fov=math.radians(float(k["horizontal_fov_deg"])),
            )
            for k in payload["keyframes"]
        )
        actors = tuple(_actor_from_dict(a) for a in payload.get("actors", []))
        if not keyframes:
            raise SceneFormatError("scene needs at least one keyframe")
        first = keyframes[0]
        camera_base = CameraPose(
            position=position,
            heading=first.heading,
            pitch=first.pitch,
            horizontal_fov=first.horizontal_fov,
            vertical_fov=vertical_fov_for(first.horizontal_fov, resolution[0], resolution[1]),
            height_above_ground=height,
        )
        return Scene(
            node_id=str(payload["node_id"]),
            camera_base=camera_base,
            keyframes=keyframes,
            actors=actors,
            duration=float(payload.get("duration_s", DEFAULT_DURATION_S)),
            fps=float(payload.get("fps", DEFAULT_FPS)),
            resolution=resolution,
            scene_prompt=str(payload.get("scene_prompt", "")),
        )
    except SceneFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneFormatError(f"malformed scene document: {exc}") from exc


def _actor_from_dict(payload: dict[str, Any]) -> Actor:
    trajectory = None
    traj_raw = payload.get("trajectory")
    if traj_raw is not None:
        trajectory = Trajectory(
            points=tuple(
                GeoPoint.from_degrees(float(lat), float(lon)) for lat, lon in traj_raw["points"]
            ),
            start_time=float(traj_raw["start_s"]),
            end_time=float(traj_raw["end_s"]),
        )
    reference = payload.get("reference_image")
    return Actor(
        actor_id=str(payload["id"]),
        anchor=GeoPoint.from_degrees(float(payload["lat_deg"]), float(payload["lon_deg"])),
        width=float(payload.get("width_m", DEFAULT_ACTOR_WIDTH_M)),
        height=float(payload.get("height_m", DEFAULT_ACTOR_HEIGHT_M)),
        prompt_fragment=str(payload.get("prompt", "")),
        reference_image=None if reference is None else str(reference),
        trajectory=trajectory,
    )


def load_scene(path: str | Path) -> Scene:
    """Load and structurally validate a scene file."""
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"not valid JSON: {exc}") from exc
    return scene_from_dict(payload)


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=2) + "\n")
