"""streetstage: street-view grounded scene staging for video inpainting.

Converts map-level authoring (actor placement, sketched trajectories, camera
keyframes over a street-view panorama) into the deterministic inputs a video
inpainting backend consumes: background frames, transparent mask frames,
prompts and reference images.
"""

__version__ = "0.1.0"

from .errors import StageError
from .geo import (
    EARTH_RADIUS_M,
    CameraPose,
    EnuOffset,
    GeoPoint,
    RelativeAngles,
    ScreenPoint,
    Visibility,
    camera_relative_angles,
    enu_offset,
    project_actor_point,
    project_point,
    range_bearing,
    unproject_to_ground,
)
from .panorama import Panorama, ViewDirection, dir_to_equirect, equirect_to_dir, render_view
from .render import FrameSequence, compose_preview, render_background, render_masks
from .staging import (
    Actor,
    CameraKeyframe,
    Scene,
    ScreenQuad,
    Trajectory,
    camera_at,
    resample_trajectory,
    sample_scene,
    validate_scene,
)

__all__ = [
    "__version__",
    "StageError",
    "EARTH_RADIUS_M",
    "CameraPose",
    "EnuOffset",
    "GeoPoint",
    "RelativeAngles",
    "ScreenPoint",
    "Visibility",
    "camera_relative_angles",
    "enu_offset",
    "project_actor_point",
    "project_point",
    "range_bearing",
    "unproject_to_ground",
    "Panorama",
    "ViewDirection",
    "dir_to_equirect",
    "equirect_to_dir",
    "render_view",
    "FrameSequence",
    "compose_preview",
    "render_background",
    "render_masks",
    "Actor",
    "CameraKeyframe",
    "Scene",
    "ScreenQuad",
    "Trajectory",
    "camera_at",
    "resample_trajectory",
    "sample_scene",
    "validate_scene",
]
