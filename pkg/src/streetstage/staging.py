"""Scene model: actors, sketched trajectories, camera keyframes, sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .errors import StageError
from .geo import (
    EARTH_RADIUS_M,
    CameraPose,
    GeoPoint,
    Visibility,
    camera_relative_angles,
    enu_offset,
    norm_tau,
    project_point,
    range_bearing,
    vertical_fov_for,
    wrap_pi,
)

DEFAULT_DURATION_S = 5.0
DEFAULT_FPS = 16.0
DEFAULT_RESOLUTION = (1280, 720)
DEFAULT_CAMERA_HEIGHT_M = 2.5
DEFAULT_ACTOR_WIDTH_M = 0.6
DEFAULT_ACTOR_HEIGHT_M = 1.7
DEFAULT_HORIZONTAL_FOV = math.radians(90.0)


class DegenerateSketchError(StageError):
    """Trajectory sketch with no usable arc length."""


@dataclass(frozen=True)
class Trajectory:
    """A sketched polyline walked at constant speed between start and end.

    Outside [start_time, end_time] the actor holds the nearest endpoint.
    """

    points: tuple[GeoPoint, ...]
    start_time: float
    end_time: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", tuple(self.points))
        if len(self.points) < 2:
            raise ValueError("trajectory needs at least 2 points")
        for a, b in zip(self.points, self.points[1:]):
            if a.latitude == b.latitude and a.longitude == b.longitude:
                raise ValueError("consecutive trajectory points must be distinct")
        if not 0.0 <= self.start_time < self.end_time:
            raise ValueError(
                f"need 0 <= start_time < end_time, got [{self.start_time}, {self.end_time}]"
            )


@dataclass(frozen=True)
class Actor:
    """A staged subject: anchor point, physical extent, prompt material."""

    actor_id: str
    anchor: GeoPoint
    width: float = DEFAULT_ACTOR_WIDTH_M
    height: float = DEFAULT_ACTOR_HEIGHT_M
    prompt_fragment: str = ""
    reference_image: str | None = None
    trajectory: Trajectory | None = None

    def __post_init__(self) -> None:
        if self.width <= 0.0 or self.height <= 0.0:
            raise ValueError(f"actor extent must be positive, got {self.width}x{self.height}")


@dataclass(frozen=True)
class CameraKeyframe:
    """Camera view parameters pinned at a timeline instant."""

    time: float
    heading: float
    pitch: float
    horizontal_fov: float

    def __post_init__(self) -> None:
        if not 0.0 < self.horizontal_fov < math.pi:
            raise ValueError(f"horizontal_fov {self.horizontal_fov} outside (0, pi)")
        object.__setattr__(self, "heading", norm_tau(self.heading))


@dataclass(frozen=True)
class Scene:
    """The unit of authoring: one street-view node plus staged content."""

    node_id: str
    camera_base: CameraPose
    keyframes: tuple[CameraKeyframe, ...]
    actors: tuple[Actor, ...] = ()
    duration: float = DEFAULT_DURATION_S
    fps: float = DEFAULT_FPS
    resolution: tuple[int, int] = DEFAULT_RESOLUTION
    scene_prompt: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "keyframes", tuple(self.keyframes))
        object.__setattr__(self, "actors", tuple(self.actors))
        object.__setattr__(self, "resolution", tuple(self.resolution))
        if self.duration <= 0.0:
            raise ValueError("duration must be positive")
        if self.fps <= 0.0:
            raise ValueError("fps must be positive")
        if self.resolution[0] <= 0 or self.resolution[1] <= 0:
            raise ValueError(f"resolution {self.resolution} must be positive")
        if not self.keyframes:
            raise ValueError("scene needs at least one camera keyframe")
        times = [k.time for k in self.keyframes]
        if times != sorted(times) or len(set(times)) != len(times):
            raise ValueError("keyframes must be sorted by time and unique")
        ids = [a.actor_id for a in self.actors]
        if len(set(ids)) != len(ids):
            raise ValueError("actor ids must be unique")

    def frame_count(self) -> int:
        return round(self.duration * self.fps)

    def frame_times(self) -> list[float]:
        return [k / self.fps for k in range(self.frame_count())]


@dataclass(frozen=True)
class ScreenQuad:
    """Axis-aligned screen rectangle in pixels (top < bottom, left < right)."""

    left: float
    top: float
    right: float
    bottom: float

    @property
    def width(self) -> float:
        return self.right - self.left

    @property
    def height(self) -> float:
        return self.bottom - self.top

    @property
    def center_u(self) -> float:
        return (self.left + self.right) / 2.0

    def clipped(self, screen: tuple[int, int]) -> "ScreenQuad | None":
        left = max(self.left, 0.0)
        top = max(self.top, 0.0)
        right = min(self.right, float(screen[0]))
        bottom = min(self.bottom, float(screen[1]))
        if left >= right or top >= bottom:
            return None
        return ScreenQuad(left, top, right, bottom)


@dataclass(frozen=True)
class ActorSample:
    """Per-actor result of sampling the scene at one instant.

    quad is None when the actor is behind the camera or entirely outside the
    viewport; error carries the message when projection failed outright.
    """

    actor_id: str
    quad: ScreenQuad | None = None
    error: str | None = None


def trajectory_arc_lengths(
    traj: Trajectory, origin: GeoPoint, radius: float = EARTH_RADIUS_M
) -> tuple[list[tuple[float, float]], list[float]]:
    """ENU vertices and cumulative arc lengths of a sketch.

    Arc length is measured in tangent-plane meters around `origin` (the
    scene's camera node).
    """
    enu = []
    for p in traj.points:
        off = enu_offset(p, origin, radius)
        enu.append((off.east, off.north))
    cumulative = [0.0]
    for (e0, n0), (e1, n1) in zip(enu, enu[1:]):
        cumulative.append(cumulative[-1] + math.hypot(e1 - e0, n1 - n0))
    return enu, cumulative


def resample_trajectory(
    traj: Trajectory, t: float, origin: GeoPoint, radius: float = EARTH_RADIUS_M
) -> GeoPoint:
    """Constant-speed position along the sketch at time t.

    Before start_time the first point is returned exactly; after end_time the
    last point. In between, positions are interpolated at uniform speed along
    the polyline's tangent-plane arc length.

    :raises DegenerateSketchError: total arc length is zero
    """
    if t <= traj.start_time:
        return traj.points[0]
    if t >= traj.end_time:
        return traj.points[-1]
    enu, cumulative = trajectory_arc_lengths(traj, origin, radius)
    total = cumulative[-1]
    if total <= 0.0:
        raise DegenerateSketchError("trajectory has zero arc length")
    target = total * (t - traj.start_time) / (traj.end_time - traj.start_time)
    seg = 0
    while seg < len(cumulative) - 2 and cumulative[seg + 1] < target:
        seg += 1
    seg_len = cumulative[seg + 1] - cumulative[seg]
    frac = 0.0 if seg_len == 0.0 else (target - cumulative[seg]) / seg_len
    east = enu[seg][0] + (enu[seg + 1][0] - enu[seg][0]) * frac
    north = enu[seg][1] + (enu[seg + 1][1] - enu[seg][1]) * frac
    latitude = origin.latitude + north / radius
    longitude = origin.longitude + east / (radius * math.cos(origin.latitude))
    return GeoPoint(latitude, longitude)


def actor_position(
    actor: Actor, t: float, origin: GeoPoint, radius: float = EARTH_RADIUS_M
) -> GeoPoint:
    if actor.trajectory is None:
        return actor.anchor
    return resample_trajectory(actor.trajectory, t, origin, radius)


def camera_at(scene: Scene, t: float) -> CameraPose:
    """Camera pose at time t.

    Keyframes interpolate piecewise-linearly; heading takes the shortest arc.
    Before the first keyframe and after the last one the pose holds. Exactly
    at a keyframe time the keyframe values are returned verbatim.
    """
    keyframes = scene.keyframes
    width, height = scene.resolution

    def pose(heading: float, pitch: float, hfov: float) -> CameraPose:
        return CameraPose(
            position=scene.camera_base.position,
            heading=heading,
            pitch=pitch,
            horizontal_fov=hfov,
            vertical_fov=vertical_fov_for(hfov, width, height),
            height_above_ground=scene.camera_base.height_above_ground,
        )

    if t <= keyframes[0].time:
        k = keyframes[0]
        return pose(k.heading, k.pitch, k.horizontal_fov)
    if t >= keyframes[-1].time:
        k = keyframes[-1]
        return pose(k.heading, k.pitch, k.horizontal_fov)
    hi = 1
    while keyframes[hi].time < t:
        hi += 1
    k1 = keyframes[hi]
    if k1.time == t:
        return pose(k1.heading, k1.pitch, k1.horizontal_fov)
    k0 = keyframes[hi - 1]
    alpha = (t - k0.time) / (k1.time - k0.time)
    heading = norm_tau(k0.heading + wrap_pi(k1.heading - k0.heading) * alpha)
    pitch = k0.pitch + (k1.pitch - k0.pitch) * alpha
    hfov = k0.horizontal_fov + (k1.horizontal_fov - k0.horizontal_fov) * alpha
    return pose(heading, pitch, hfov)


def actor_quad(
    actor: Actor,
    position: GeoPoint,
    camera: CameraPose,
    screen: tuple[int, int],
    radius: float = EARTH_RADIUS_M,
) -> ScreenQuad | None:
    """Unclipped screen quad of an actor, or None when behind the camera.

    The quad is an axis-aligned vertical card: bottom and top come from
    projecting the ground point and the head point; the horizontal extent
    comes from the angular half-width atan(width / (2d)) pushed through the
    same pinhole mapping.
    """
    distance, bearing = range_bearing(enu_offset(position, camera.position, radius))
    bottom_angles = camera_relative_angles(distance, bearing, camera, 0.0)
    top_angles = camera_relative_angles(distance, bearing, camera, actor.height)
    bottom = project_point(bottom_angles, camera, screen)
    top = project_point(top_angles, camera, screen)
    if (
        bottom.visibility is Visibility.BEHIND_CAMERA
        or top.visibility is Visibility.BEHIND_CAMERA
        or distance == 0.0
    ):
        return None
    half_width = math.atan(actor.width / (2.0 * distance))
    left_angles = replace(bottom_angles, azimuth=wrap_pi(bottom_angles.azimuth - half_width), elevation=0.0)
    right_angles = replace(bottom_angles, azimuth=wrap_pi(bottom_angles.azimuth + half_width), elevation=0.0)
    left = project_point(left_angles, camera, screen)
    right = project_point(right_angles, camera, screen)
    if (
        left.visibility is Visibility.BEHIND_CAMERA
        or right.visibility is Visibility.BEHIND_CAMERA
    ):
        return None
    return ScreenQuad(left=left.u, top=top.v, right=right.u, bottom=bottom.v)


def sample_scene(scene: Scene, t: float, radius: float = EARTH_RADIUS_M) -> list[ActorSample]:
    """Screen quads of every actor at time t, in actor order.

    Actors behind the camera or fully outside the viewport yield quad=None;
    per-actor projection errors are captured in `error` without aborting the
    remaining actors. Quads are clipped to the viewport.
    """
    camera = camera_at(scene, t)
    samples: list[ActorSample] = []
    for actor in scene.actors:
        try:
            position = actor_position(actor, t, scene.camera_base.position, radius)
            quad = actor_quad(actor, position, camera, scene.resolution, radius)
        except StageError as exc:
            samples.append(ActorSample(actor.actor_id, error=str(exc)))
            continue
        if quad is not None:
            quad = quad.clipped(scene.resolution)
        samples.append(ActorSample(actor.actor_id, quad=quad))
    return samples


def validate_scene(scene: Scene, radius: float = EARTH_RADIUS_M) -> list[str]:
    """Semantic diagnostics; an empty list means the scene is stageable."""
    diagnostics: list[str] = []
    if scene.keyframes[0].time != 0.0:
        diagnostics.append("scene has no keyframe at t=0")
    for k in scene.keyframes:
        if not 0.0 <= k.time <= scene.duration:
            diagnostics.append(
                f"keyframe at t={k.time} outside [0, {scene.duration}]"
            )
    origin = scene.camera_base.position
    for actor in scene.actors:
        try:
            enu_offset(actor.anchor, origin, radius)
        except StageError as exc:
            diagnostics.append(f"actor {actor.actor_id!r}: anchor: {exc}")
        traj = actor.trajectory
        if traj is None:
            continue
        if traj.end_time > scene.duration:
            diagnostics.append(
                f"actor {actor.actor_id!r}: trajectory ends at {traj.end_time} "
                f"after scene duration {scene.duration}"
            )
        first = traj.points[0]
        if (first.latitude, first.longitude) != (actor.anchor.latitude, actor.anchor.longitude):
            diagnostics.append(
                f"actor {actor.actor_id!r}: trajectory start differs from anchor"
            )
        for i, p in enumerate(traj.points):
            try:
                enu_offset(p, origin, radius)
            except StageError as exc:
                diagnostics.append(f"actor {actor.actor_id!r}: sketch point {i}: {exc}")
    return diagnostics
