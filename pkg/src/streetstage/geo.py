"""Geodetic-to-screen projection for a ground-anchored pinhole camera.

Conventions used throughout the package:

* angles are radians internally; degrees appear only at file/API boundaries
* latitude is positive north, longitude positive east
* heading is measured clockwise from true north, normalized to [0, 2*pi)
* pitch is positive above the horizon
* screen coordinates have the origin at the top-left corner, u growing
  right and v growing down, in pixels
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

from .errors import StageError

#: Mean earth radius (meters). Spherical model; adequate for the sub-10 km
#: extents this package operates over.
EARTH_RADIUS_M = 6_371_008.8

#: Tangent-plane approximation validity guard (meters).
MAX_ENU_RANGE_M = 10_000.0

#: Latitude magnitude beyond which the local east/west scale is rejected.
POLE_GUARD_RAD = math.radians(89.0)


class PoleProximityError(StageError):
    """Camera latitude too close to a pole for the tangent-plane model."""


class OutOfRangeError(StageError):
    """Offset magnitude exceeds the tangent-plane validity guard."""


class NoGroundIntersectionError(StageError):
    """View ray does not hit the ground plane in front of the camera."""


def wrap_pi(angle: float) -> float:
    """Wrap a finite angle into (-pi, pi]. Idempotent."""
    wrapped = math.remainder(angle, math.tau)
    if wrapped <= -math.pi:
        wrapped += math.tau
    return wrapped


def norm_tau(angle: float) -> float:
    """Normalize a finite angle into [0, 2*pi). Idempotent."""
    wrapped = math.fmod(angle, math.tau)
    if wrapped < 0.0:
        wrapped += math.tau
    if wrapped >= math.tau:  # fmod result of -eps can round up to tau
        wrapped = 0.0
    return wrapped


@dataclass(frozen=True)
class GeoPoint:
    """A point on the earth in radians.

    Longitude is normalized into (-pi, pi] at construction; latitude must
    already lie in [-pi/2, pi/2].
    """

    latitude: float
    longitude: float

    def __post_init__(self) -> None:
        if not -math.pi / 2 <= self.latitude <= math.pi / 2:
            raise ValueError(f"latitude {self.latitude} outside [-pi/2, pi/2]")
        object.__setattr__(self, "longitude", wrap_pi(self.longitude))

    @classmethod
    def from_degrees(cls, lat_deg: float, lon_deg: float) -> "GeoPoint":
        return cls(math.radians(lat_deg), math.radians(lon_deg))

    @property
    def latitude_deg(self) -> float:
        return math.degrees(self.latitude)

    @property
    def longitude_deg(self) -> float:
        return math.degrees(self.longitude)


@dataclass(frozen=True)
class EnuOffset:
    """Local tangent-plane offset in meters: east (+x) and north (+z)."""

    east: float
    north: float

    @property
    def magnitude(self) -> float:
        return math.hypot(self.east, self.north)


def vertical_fov_for(horizontal_fov: float, width: int, height: int) -> float:
    """Vertical FOV consistent with square pixels at the given raster shape.

    Derived from tan(av/2) = tan(ah/2) * height / width.
    """
    return 2.0 * math.atan(math.tan(horizontal_fov / 2.0) * height / width)


@dataclass(frozen=True)
class CameraPose:
    """Camera with a geodetic position and view parameters.

    :param position: geodetic camera location
    :param heading: view azimuth, clockwise from north (normalized to [0, 2pi))
    :param pitch: view elevation, positive above the horizon
    :param horizontal_fov: full horizontal field of view, in (0, pi)
    :param vertical_fov: full vertical field of view, in (0, pi)
    :param height_above_ground: camera height h_c above the local ground, meters
    """

    position: GeoPoint
    heading: float
    pitch: float
    horizontal_fov: float
    vertical_fov: float
    height_above_ground: float

    def __post_init__(self) -> None:
        if not 0.0 < self.horizontal_fov < math.pi:
            raise ValueError(f"horizontal_fov {self.horizontal_fov} outside (0, pi)")
        if not 0.0 < self.vertical_fov < math.pi:
            raise ValueError(f"vertical_fov {self.vertical_fov} outside (0, pi)")
        if self.height_above_ground < 0.0:
            raise ValueError("height_above_ground must be >= 0")
        object.__setattr__(self, "heading", norm_tau(self.heading))


@dataclass(frozen=True)
class RelativeAngles:
    """Subject direction relative to the camera axis, both in (-pi, pi]."""

    azimuth: float
    elevation: float


class Visibility(Enum):
    ON_SCREEN = "on_screen"
    OFF_SCREEN = "off_screen"
    BEHIND_CAMERA = "behind_camera"


@dataclass(frozen=True)
class ScreenPoint:
    """Projected pixel position; u/v are NaN when behind the camera."""

    u: float
    v: float
    visibility: Visibility


def enu_offset(
    actor: GeoPoint, camera: GeoPoint, radius: float = EARTH_RADIUS_M
) -> EnuOffset:
    """Project an actor position onto the camera's local tangent plane.

    east  = R * cos(lat_c) * wrap(lon_a - lon_c)
    north = R * (lat_a - lat_c)

    The longitude difference is wrapped before scaling so antimeridian
    crossings take the short way around.

    :raises PoleProximityError: camera latitude beyond +-89 degrees
    :raises OutOfRangeError: offset magnitude >= 10 km
    """
    if abs(camera.latitude) >= POLE_GUARD_RAD:
        raise PoleProximityError(
            f"camera latitude {camera.latitude_deg:.4f} deg too close to a pole"
        )
    east = radius * math.cos(camera.latitude) * wrap_pi(actor.longitude - camera.longitude)
    north = radius * (actor.latitude - camera.latitude)
    offset = EnuOffset(east, north)
    if offset.magnitude >= MAX_ENU_RANGE_M:
        raise OutOfRangeError(
            f"offset {offset.magnitude:.1f} m exceeds {MAX_ENU_RANGE_M:.0f} m guard"
        )
    return offset


def range_bearing(offset: EnuOffset) -> tuple[float, float]:
    """Ground range (meters) and bearing (radians, clockwise from north).

    A zero offset has bearing 0 by convention.
    """
    distance = offset.magnitude
    if distance == 0.0:
        return 0.0, 0.0
    return distance, atan2_bearing(offset.east, offset.north)


def atan2_bearing(east: float, north: float) -> float:
    """Bearing of an ENU offset, normalized to [0, 2*pi)."""
    return norm_tau(math.atan2(east, north))


def camera_relative_angles(
    distance: float,
    bearing: float,
    camera: CameraPose,
    subject_height: float = 0.0,
) -> RelativeAngles:
    """Angles of a subject relative to the camera axis.

    azimuth   = wrap(bearing - heading)
    elevation = atan2(subject_height - h_c, distance) - pitch

    A subject at zero ground range sits straight up or straight down, which
    atan2 resolves to +-pi/2.
    """
    azimuth = wrap_pi(bearing - camera.heading)
    elevation = wrap_pi(
        math.atan2(subject_height - camera.height_above_ground, distance) - camera.pitch
    )
    return RelativeAngles(azimuth, elevation)


def project_point(
    angles: RelativeAngles, camera: CameraPose, screen: tuple[int, int]
) -> ScreenPoint:
    """Map camera-relative angles to pixel coordinates.

    s_x = tan(azimuth) / tan(ah/2);  s_y = -tan(elevation) / tan(av/2)
    u = (s_x + 1)/2 * W;             v = (s_y + 1)/2 * H

    Directions with |azimuth| >= pi/2 or |elevation| >= pi/2 are classified
    behind_camera and produce NaN coordinates. on_screen means
    u in [0, W) and v in [0, H).
    """
    width, height = screen
    if width <= 0 or height <= 0:
        raise ValueError(f"screen {screen} must be positive")
    if abs(angles.azimuth) >= math.pi / 2 or abs(angles.elevation) >= math.pi / 2:
        return ScreenPoint(math.nan, math.nan, Visibility.BEHIND_CAMERA)
    s_x = math.tan(angles.azimuth) / math.tan(camera.horizontal_fov / 2.0)
    s_y = -math.tan(angles.elevation) / math.tan(camera.vertical_fov / 2.0)
    u = (s_x + 1.0) / 2.0 * width
    v = (s_y + 1.0) / 2.0 * height
    if 0.0 <= u < width and 0.0 <= v < height:
        visibility = Visibility.ON_SCREEN
    else:
        visibility = Visibility.OFF_SCREEN
    return ScreenPoint(u, v, visibility)


def project_actor_point(
    actor: GeoPoint,
    subject_height: float,
    camera: CameraPose,
    screen: tuple[int, int],
    radius: float = EARTH_RADIUS_M,
) -> ScreenPoint:
    """Full chain: geodetic actor point to screen pixel.

    Composition of enu_offset, range_bearing, camera_relative_angles and
    project_point; raises whatever those steps raise.
    """
    distance, bearing = range_bearing(enu_offset(actor, camera.position, radius))
    angles = camera_relative_angles(distance, bearing, camera, subject_height)
    return project_point(angles, camera, screen)


def unproject_to_ground(
    u: float,
    v: float,
    camera: CameraPose,
    screen: tuple[int, int],
    radius: float = EARTH_RADIUS_M,
) -> GeoPoint:
    """Invert the projection chain for a ground point (subject height 0).

    Requires a strictly positive camera height and a view ray pointing below
    the horizontal; the ray is intersected with the local ground plane and
    mapped back through the inverse tangent-plane step.

    :raises NoGroundIntersectionError: ray at/above horizontal, past nadir,
        or camera at ground level
    :raises OutOfRangeError: ground hit beyond the 10 km tangent-plane guard
    :raises PoleProximityError: camera latitude beyond +-89 degrees
    """
    width, height = screen
    if width <= 0 or height <= 0:
        raise ValueError(f"screen {screen} must be positive")
    if abs(camera.position.latitude) >= POLE_GUARD_RAD:
        raise PoleProximityError(
            f"camera latitude {camera.position.latitude_deg:.4f} deg too close to a pole"
        )
    if camera.height_above_ground <= 0.0:
        raise NoGroundIntersectionError("camera at ground level sees no ground point")
    s_x = 2.0 * u / width - 1.0
    s_y = 2.0 * v / height - 1.0
    azimuth = math.atan(s_x * math.tan(camera.horizontal_fov / 2.0))
    elevation = -math.atan(s_y * math.tan(camera.vertical_fov / 2.0))
    ray_elevation = camera.pitch + elevation
    if ray_elevation >= 0.0:
        raise NoGroundIntersectionError("view ray points at or above the horizontal")
    if ray_elevation <= -math.pi / 2:
        raise NoGroundIntersectionError("view ray points past the nadir")
    distance = camera.height_above_ground / math.tan(-ray_elevation)
    if distance >= MAX_ENU_RANGE_M:
        raise OutOfRangeError(
            f"ground hit at {distance:.1f} m exceeds {MAX_ENU_RANGE_M:.0f} m guard"
        )
    ground_bearing = camera.heading + azimuth
    east = distance * math.sin(ground_bearing)
    north = distance * math.cos(ground_bearing)
    latitude = camera.position.latitude + north / radius
    longitude = camera.position.longitude + east / (radius * math.cos(camera.position.latitude))
    return GeoPoint(latitude, longitude)
