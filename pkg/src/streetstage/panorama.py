"""Equirectangular panorama sampling and perspective view extraction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import StageError
from .geo import CameraPose, norm_tau, wrap_pi


class OutOfRasterError(StageError):
    """Raster coordinate outside the panorama extent."""


@dataclass(frozen=True)
class ViewDirection:
    """World-frame view direction: yaw clockwise from north in [0, 2*pi),
    pitch in [-pi/2, pi/2]."""

    yaw: float
    pitch: float

    def __post_init__(self) -> None:
        if not -math.pi / 2 <= self.pitch <= math.pi / 2:
            raise ValueError(f"pitch {self.pitch} outside [-pi/2, pi/2]")
        object.__setattr__(self, "yaw", norm_tau(self.yaw))


@dataclass(frozen=True)
class Panorama:
    """A 2:1 equirectangular RGB raster.

    north_offset is the yaw of the raster's left edge column, i.e. the
    compass direction that maps to u_e = 0.
    """

    pixels: np.ndarray
    north_offset: float = 0.0

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"panorama raster must be HxWx3, got {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise ValueError(f"panorama raster must be uint8, got {self.pixels.dtype}")
        if self.pixels.shape[1] != 2 * self.pixels.shape[0]:
            raise ValueError(
                f"equirectangular raster must be 2:1, got {self.pixels.shape[1]}x{self.pixels.shape[0]}"
            )
        object.__setattr__(self, "north_offset", norm_tau(self.north_offset))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def dir_to_equirect(direction: ViewDirection, pano: Panorama) -> tuple[float, float]:
    """Continuous raster coordinates of a view direction.

    u_e = ((wrap(yaw - north_offset) / 2pi) mod 1) * W_e, in [0, W_e)
    v_e = (0.5 - pitch / pi) * H_e, in [0, H_e]
    """
    frac = (wrap_pi(direction.yaw - pano.north_offset) / math.tau) % 1.0
    u_e = frac * pano.width
    if u_e >= pano.width:  # mod of a tiny negative can round up to 1.0
        u_e -= pano.width
    v_e = (0.5 - direction.pitch / math.pi) * pano.height
    return u_e, v_e


def equirect_to_dir(u_e: float, v_e: float, pano: Panorama) -> ViewDirection:
    """Inverse of dir_to_equirect for in-raster coordinates.

    :raises OutOfRasterError: u_e outside [0, W_e) or v_e outside [0, H_e]
    """
    if not 0.0 <= u_e < pano.width or not 0.0 <= v_e <= pano.height:
        raise OutOfRasterError(f"({u_e}, {v_e}) outside {pano.width}x{pano.height} raster")
    yaw = pano.north_offset + u_e / pano.width * math.tau
    pitch = (0.5 - v_e / pano.height) * math.pi
    return ViewDirection(yaw, pitch)


def sample_bilinear(pano: Panorama, u_e: np.ndarray, v_e: np.ndarray) -> np.ndarray:
    """Bilinear sample at continuous raster coordinates.

    Wraps horizontally (column W_e - 1 blends into column 0) and clamps
    vertically. Returns float64 values in [0, 255] with the input shape
    plus a trailing channel axis.
    """
    width = pano.width
    height = pano.height
    u = np.asarray(u_e, dtype=np.float64)
    v = np.clip(np.asarray(v_e, dtype=np.float64), 0.0, height - 1.0)
    x0f = np.floor(u)
    y0f = np.floor(v)
    fx = (u - x0f)[..., None]
    fy = (v - y0f)[..., None]
    x0 = x0f.astype(np.int64) % width
    x1 = (x0 + 1) % width
    y0 = y0f.astype(np.int64)
    y1 = np.minimum(y0 + 1, height - 1)
    px = pano.pixels
    top = px[y0, x0] * (1.0 - fx) + px[y0, x1] * fx
    bottom = px[y1, x0] * (1.0 - fx) + px[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def view_ray_angles(
    camera: CameraPose, screen: tuple[int, int]
) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel-center ray angles relative to the camera axis.

    Returns (azimuth[W], elevation[H]) built from the inverse of the pinhole
    mapping, evaluated at pixel centers (j + 0.5, i + 0.5). The grids are
    separable: azimuth varies only with the column, elevation only with the
    row.
    """
    width, height = screen
    if width <= 0 or height <= 0:
        raise ValueError(f"screen {screen} must be positive")
    s_x = (2.0 * (np.arange(width, dtype=np.float64) + 0.5) - width) / width
    s_y = (2.0 * (np.arange(height, dtype=np.float64) + 0.5) - height) / height
    azimuth = np.arctan(s_x * math.tan(camera.horizontal_fov / 2.0))
    elevation = -np.arctan(s_y * math.tan(camera.vertical_fov / 2.0))
    return azimuth, elevation


def render_view(
    pano: Panorama, camera: CameraPose, screen: tuple[int, int]
) -> np.ndarray:
    """Extract a perspective view from the panorama.

    Each output pixel is produced by casting its center ray back into the
    equirectangular raster and sampling bilinearly (inverse mapping; no
    forward warping). Returns an (H, W, 3) uint8 array.

    The camera is assumed to sit at the panorama's capture position; only
    heading, pitch and FOV participate.
    """
    width, height = screen
    azimuth, elevation = view_ray_angles(camera, screen)
    # Fold heading and north offset into one scalar before the per-pixel
    # addition; yaw only ever enters through this difference.
    base = camera.heading - pano.north_offset
    u_frac = ((base + azimuth) / math.tau) % 1.0
    u_e = u_frac * pano.width
    u_e = np.where(u_e >= pano.width, u_e - pano.width, u_e)
    pitch = camera.pitch + elevation
    v_e = (0.5 - pitch / math.pi) * pano.height
    values = sample_bilinear(pano, np.broadcast_to(u_e, (height, width)),
                             np.broadcast_to(v_e[:, None], (height, width)))
    return np.rint(values).astype(np.uint8)
