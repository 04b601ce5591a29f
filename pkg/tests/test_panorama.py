"""Equirectangular mapping and perspective rendering tests."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streetstage.geo import CameraPose, GeoPoint
from streetstage.panorama import (
    OutOfRasterError,
    Panorama,
    ViewDirection,
    dir_to_equirect,
    equirect_to_dir,
    render_view,
    sample_bilinear,
    view_ray_angles,
)

from oracles import bilinear_probe, panorama_pixel_oracle


def make_panorama(width=256, north_offset=0.0, seed=7) -> Panorama:
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(width // 2, width, 3), dtype=np.uint8)
    return Panorama(pixels=pixels, north_offset=north_offset)


def make_view_camera(heading=0.0, pitch=0.0, hfov=math.radians(90.0), vfov=None) -> CameraPose:
    return CameraPose(
        position=GeoPoint.from_degrees(40.0, -105.0),
        heading=heading,
        pitch=pitch,
        horizontal_fov=hfov,
        vertical_fov=vfov if vfov is not None else hfov / 2.0,
        height_above_ground=2.5,
    )


def test_panorama_validates_shape():
    with pytest.raises(ValueError):
        Panorama(pixels=np.zeros((100, 250, 3), dtype=np.uint8), north_offset=0.0)
    with pytest.raises(ValueError):
        Panorama(pixels=np.zeros((128, 256, 3), dtype=np.float32), north_offset=0.0)


# ------------------------------------------------------------- mapping


def test_dir_to_equirect_quarters():
    pano = make_panorama(width=2048)
    # yaw due east with zero offset lands a quarter across
    u, v = dir_to_equirect(ViewDirection(math.pi / 2, 0.0), pano)
    assert u == pytest.approx(512.0)
    assert v == pytest.approx(512.0)
    u, v = dir_to_equirect(ViewDirection(0.0, math.pi / 2), pano)
    assert v == 0.0
    u, v = dir_to_equirect(ViewDirection(0.0, -math.pi / 2), pano)
    assert v == 1024.0


def test_dir_to_equirect_honors_north_offset():
    pano = make_panorama(width=2048, north_offset=math.pi / 2)
    u, _ = dir_to_equirect(ViewDirection(math.pi / 2, 0.0), pano)
    assert u == pytest.approx(0.0)


def test_equirect_to_dir_rejects_out_of_raster():
    pano = make_panorama(width=256)
    with pytest.raises(OutOfRasterError):
        equirect_to_dir(-0.5, 10.0, pano)
    with pytest.raises(OutOfRasterError):
        equirect_to_dir(256.0, 10.0, pano)
    with pytest.raises(OutOfRasterError):
        equirect_to_dir(10.0, 128.5, pano)


@given(
    st.floats(min_value=0.0, max_value=math.tau - 1e-9),
    st.floats(min_value=-math.pi / 2 + 1e-6, max_value=math.pi / 2 - 1e-6),
    st.floats(min_value=-math.pi, max_value=math.pi),
)
@settings(max_examples=300)
def test_mapping_round_trip(yaw, pitch, north_offset):
    pano = make_panorama(width=512, north_offset=north_offset)
    u, v = dir_to_equirect(ViewDirection(yaw, pitch), pano)
    direction = equirect_to_dir(u, v, pano)
    dyaw = abs(math.remainder(direction.yaw - yaw, math.tau))
    assert dyaw < 1e-6
    assert abs(direction.pitch - pitch) < 1e-6


# ------------------------------------------------------------- sampling


def test_sample_bilinear_matches_scalar_probe():
    pano = make_panorama(width=64, seed=3)
    rng = np.random.default_rng(11)
    us = rng.uniform(-1.0, 65.0, size=200)
    vs = rng.uniform(-1.0, 33.0, size=200)
    got = sample_bilinear(pano, us, vs)
    for i in range(200):
        expected = bilinear_probe(pano.pixels, float(us[i]), float(vs[i]))
        assert got[i] == pytest.approx(expected, abs=1e-9)


def test_sample_bilinear_wraps_horizontal_seam():
    pixels = np.zeros((4, 8, 3), dtype=np.uint8)
    pixels[:, 0] = 100
    pixels[:, 7] = 200
    pano = Panorama(pixels=pixels)
    # halfway between last and first column blends across the seam
    got = sample_bilinear(pano, np.array([7.5]), np.array([1.0]))
    assert got[0] == pytest.approx([150.0, 150.0, 150.0])


def test_sample_bilinear_clamps_vertical():
    pixels = np.zeros((4, 8, 3), dtype=np.uint8)
    pixels[0] = 50
    pano = Panorama(pixels=pixels)
    got = sample_bilinear(pano, np.array([2.0]), np.array([-3.0]))
    assert got[0] == pytest.approx([50.0, 50.0, 50.0])


# ------------------------------------------------------------ rendering


def test_view_ray_angles_center_and_edges():
    camera = make_view_camera(hfov=math.radians(90.0), vfov=math.radians(60.0))
    azimuth, elevation = view_ray_angles(camera, (4, 4))
    assert azimuth.shape == (4,) and elevation.shape == (4,)
    # pixel centers are symmetric about the axis
    assert azimuth[0] == pytest.approx(-azimuth[3])
    assert elevation[0] == pytest.approx(-elevation[3])
    assert elevation[0] > 0  # top row looks up


def test_render_view_matches_pixel_oracle():
    pano = make_panorama(width=160, north_offset=0.35, seed=21)
    camera = make_view_camera(
        heading=1.1, pitch=-0.12, hfov=math.radians(80.0), vfov=math.radians(50.0)
    )
    size = (48, 30)
    view = render_view(pano, camera, size)
    assert view.shape == (30, 48, 3) and view.dtype == np.uint8
    for x, y in [(0, 0), (47, 29), (24, 15), (3, 22), (40, 5)]:
        expected = panorama_pixel_oracle(
            pano.pixels,
            pano.north_offset,
            camera.heading,
            camera.pitch,
            camera.horizontal_fov,
            camera.vertical_fov,
            size,
            x,
            y,
        )
        assert abs(float(view[y, x, 0]) - expected) <= 1.0


def test_render_view_center_pixel_odd_size():
    """With odd dimensions the center ray passes straight through."""
    pano = make_panorama(width=256, north_offset=0.0, seed=5)
    camera = make_view_camera(
        heading=math.pi / 2, pitch=0.0, hfov=math.radians(60), vfov=math.radians(40)
    )
    view = render_view(pano, camera, (5, 5))
    u, v = dir_to_equirect(ViewDirection(camera.heading, camera.pitch), pano)
    expected = bilinear_probe(pano.pixels, u, v)
    assert float(view[2, 2, 0]) == pytest.approx(expected[0], abs=1.0)


# keep heading + delta below 2*pi so normalization never rounds
DYADIC = st.integers(min_value=0, max_value=3216).map(lambda k: k * 2.0**-10)


@given(DYADIC, DYADIC)
@settings(max_examples=50, deadline=None)
def test_render_yaw_equivariance_bitwise(heading, delta):
    """Rotating camera and panorama frame together is a no-op, bit for bit."""
    pano_a = make_panorama(width=128, north_offset=0.0, seed=9)
    pano_b = Panorama(pixels=pano_a.pixels, north_offset=delta)
    cam_a = make_view_camera(heading=heading, pitch=0.1, hfov=math.radians(70), vfov=math.radians(40))
    cam_b = make_view_camera(heading=heading + delta, pitch=0.1, hfov=math.radians(70), vfov=math.radians(40))
    size = (32, 16)
    view_a = render_view(pano_a, cam_a, size)
    view_b = render_view(pano_b, cam_b, size)
    assert np.array_equal(view_a, view_b)


def test_render_fov_shrink_contains_center():
    """Halving the FOV reads a subset of rays around the camera axis."""
    wide = make_view_camera(hfov=math.radians(90), vfov=math.radians(50))
    narrow = make_view_camera(hfov=math.radians(45), vfov=math.radians(25))
    wide_az, _ = view_ray_angles(wide, (64, 32))
    narrow_az, _ = view_ray_angles(narrow, (64, 32))
    assert narrow_az.min() > wide_az.min()
    assert narrow_az.max() < wide_az.max()
