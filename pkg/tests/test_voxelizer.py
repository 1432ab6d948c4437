import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxhand.errors import EmptyForeground, InvalidSpec
from voxhand.voxelizer import (CameraIntrinsics, DepthImage, TsdfVolume, VoxelGridSpec, backproject, compute_com,
                               depth_to_tsdf, voxelize)

from _oracles import brute_force_tsdf

K = CameraIntrinsics(200.0, 210.0, 31.5, 23.5)


def single_pixel(u, v, z, w=64, h=48):
    d = np.zeros((h, w))
    d[v, u] = z
    return DepthImage(d)


def test_backproject_principal_ray():
    k = CameraIntrinsics(100.0, 100.0, 10.0, 12.0)
    pts = backproject(single_pixel(10, 12, 500), k)
    np.testing.assert_array_equal(pts, [[0, 0, 500]])


def test_backproject_unit_tangent():
    k = CameraIntrinsics(20.0, 20.0, 10.0, 12.0)
    pts = backproject(single_pixel(30, 12, 500), k)
    np.testing.assert_allclose(pts, [[500, 0, 500]])


def test_backproject_random_pixels_match_hand_computation():
    rng = np.random.default_rng(3)
    d = np.zeros((48, 64))
    rows, cols = rng.integers(0, 48, 10), rng.integers(0, 64, 10)
    d[rows, cols] = rng.uniform(300, 800, 10)
    pts = backproject(DepthImage(d), K)
    expect = []
    for v in range(48):
        for u in range(64):
            z = d[v, u]
            if z > 0:
                expect.append(((u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z))
    np.testing.assert_allclose(pts, expect, rtol=1e-12)


def test_backproject_ignores_unmasked_and_missing():
    d = np.full((4, 4), 500.0)
    d[0, 0] = 0
    mask = np.ones((4, 4), bool)
    mask[1, 1] = False
    assert backproject(DepthImage(d, mask), K).shape == (14, 3)


def test_empty_foreground_raises():
    with pytest.raises(EmptyForeground):
        compute_com(DepthImage(np.zeros((5, 5))), K)
    with pytest.raises(EmptyForeground):
        voxelize(DepthImage(np.full((5, 5), 400.0), np.zeros((5, 5), bool)), K)


def test_com_single_and_symmetric():
    k = CameraIntrinsics(100.0, 100.0, 10.0, 10.0)
    np.testing.assert_array_equal(compute_com(single_pixel(10, 10, 500, 21, 21), k), [0, 0, 500])
    d = np.zeros((21, 21))
    d[10, 5] = d[10, 15] = 400
    np.testing.assert_allclose(compute_com(DepthImage(d), k), [0, 0, 400], atol=1e-12)


def test_com_random_cloud_independent_sum():
    rng = np.random.default_rng(11)
    d = np.zeros((48, 64))
    flat = rng.choice(48 * 64, 20, replace=False)
    d.flat[flat] = rng.uniform(300, 900, 20)
    sx = sy = sz = 0.0
    for i in flat:
        v, u = divmod(int(i), 64)
        z = d[v, u]
        sx += (u - K.cx) * z / K.fx
        sy += (v - K.cy) * z / K.fy
        sz += z
    np.testing.assert_allclose(compute_com(DepthImage(d), K), [sx / 20, sy / 20, sz / 20], rtol=1e-12)


def test_types_validate():
    with pytest.raises(InvalidSpec):
        CameraIntrinsics(0, 1, 0, 0)
    with pytest.raises(InvalidSpec):
        CameraIntrinsics(1, 1, np.nan, 0)
    with pytest.raises(InvalidSpec):
        DepthImage(np.array([[1.0, -1.0]]))
    with pytest.raises(InvalidSpec):
        DepthImage(np.ones((2, 2)), np.ones((2, 3), bool))
    for bad in ((1, 5, 50), (8, 0, 50), (8, 5, 0)):
        with pytest.raises(InvalidSpec):
            VoxelGridSpec(*bad)
    with pytest.raises(InvalidSpec):
        TsdfVolume(VoxelGridSpec(2), np.zeros(3), np.full(8, 1.5))
    assert VoxelGridSpec().extent == 300


def test_default_grid_matches_reference_values():
    g = VoxelGridSpec()
    assert (g.resolution, g.voxel_size, g.truncation) == (60, 5.0, 50.0)


def _plane(z, w=64, h=48):
    return DepthImage(np.full((h, w), float(z)))


def test_surface_front_and_behind():
    spec = VoxelGridSpec(4, 10.0, 50.0)
    k = CameraIntrinsics(50.0, 50.0, 31.5, 23.5)
    # grid z centres at com_z + (-15, -5, 5, 15)
    vol = depth_to_tsdf(_plane(500), k, (0, 0, 505), spec)
    np.testing.assert_allclose(vol.values[:, 0, 0], [0.2, 0.0, -0.2, -0.4])
    far = depth_to_tsdf(_plane(500), k, (0, 0, 500 - 70), spec).values
    assert np.all(far == 1.0)
    near = depth_to_tsdf(_plane(500), k, (0, 0, 500 + 70), spec).values
    assert np.all(near == -1.0)


def test_two_pixel_grid_matches_brute_force():
    d = np.zeros((16, 16))
    d[7, 7], d[8, 9] = 480.0, 523.0
    img = DepthImage(d)
    k = CameraIntrinsics(30.0, 30.0, 7.5, 7.5)
    spec = VoxelGridSpec(8, 6.0, 20.0)
    com = compute_com(img, k)
    vol = depth_to_tsdf(img, k, com, spec)
    ref = brute_force_tsdf(d, d > 0, k.fx, k.fy, k.cx, k.cy, com, 8, 6.0, 20.0)
    assert np.array_equal(vol.values, ref)
    assert np.any(vol.values < 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_random_images_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    d = rng.uniform(350, 650, (12, 14)) * (rng.random((12, 14)) < 0.6)
    mask = rng.random((12, 14)) < 0.8
    if not np.any(mask & (d > 0)):
        return
    img = DepthImage(d, mask)
    k = CameraIntrinsics(120.0, 110.0, 6.5, 5.5)
    spec = VoxelGridSpec(6, 15.0, 30.0)
    vol = voxelize(img, k, spec)
    ref = brute_force_tsdf(d, mask, k.fx, k.fy, k.cx, k.cy, vol.origin, 6, 15.0, 30.0)
    assert np.array_equal(vol.values, ref)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(1.0, 200.0))
def test_values_bounded(seed, trunc):
    rng = np.random.default_rng(seed)
    d = rng.uniform(1, 3000, (10, 10)) * (rng.random((10, 10)) < 0.7)
    d[0, 0] = 500
    vol = voxelize(DepthImage(d), K, VoxelGridSpec(6, 20.0, trunc))
    assert np.all(np.abs(vol.values) <= 1)


@settings(max_examples=30, deadline=None)
@given(st.floats(-60, 60), st.floats(-60, 60), st.floats(-150, 150))
def test_translation_of_scene_and_com_leaves_values(tx, ty, tz):
    # a fronto-parallel plane filling the frustum looks the same after any translation
    k = CameraIntrinsics(60.0, 60.0, 63.5, 63.5)
    spec = VoxelGridSpec(8, 5.0, 20.0)
    base = depth_to_tsdf(_plane(600, 128, 128), k, (0, 0, 610), spec)
    moved = depth_to_tsdf(_plane(600 + tz, 128, 128), k, (tx, ty, 610 + tz), spec)
    np.testing.assert_allclose(moved.values, base.values, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_non_increasing_along_rays(seed):
    rng = np.random.default_rng(seed)
    d = rng.uniform(450, 550, (20, 20))
    k = CameraIntrinsics(80.0, 80.0, 9.5, 9.5)
    vol = voxelize(DepthImage(d), k, VoxelGridSpec(8, 8.0, 40.0))
    c = vol.voxel_centers().reshape(-1, 3)
    uv = np.floor(k.project(c) + 0.5).astype(int)
    vals = vol.values.reshape(-1)
    groups = {}
    for i, key in enumerate(map(tuple, uv)):
        groups.setdefault(key, []).append(i)
    for idx in groups.values():
        order = sorted(idx, key=lambda i: c[i, 2])
        assert np.all(np.diff(vals[order]) <= 0)


def test_invalid_spec_argument():
    with pytest.raises(InvalidSpec):
        depth_to_tsdf(_plane(500), K, (0, 0, 500), spec=(8, 5, 50))
    with pytest.raises(InvalidSpec):
        depth_to_tsdf(_plane(500), K, (0, np.inf, 500), VoxelGridSpec(4))


def test_values_are_immutable():
    vol = voxelize(_plane(500), K, VoxelGridSpec(4))
    with pytest.raises(ValueError):
        vol.values[0, 0, 0] = 0
