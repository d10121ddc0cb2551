import numpy as np
import pytest

from multidepth.core import CameraIntrinsics, DepthMap, ImageTensor, Rng
from multidepth.geometry import PointCloud, project, to_spherical, unproject


def test_unproject_principal_ray():
    k = CameraIntrinsics(1.0, 1.0, 0.0, 0.0)
    d = DepthMap.full(np.array([[1.0]], dtype=np.float32))
    pc = unproject(d, k)
    np.testing.assert_allclose(pc.points, [[0.0, 0.0, 1.0]])


def test_unproject_principal_point_symmetry():
    k = CameraIntrinsics(500.0, 500.0, 256.0, 256.0)
    depth = np.full((512, 512), 2.0, dtype=np.float32)
    pc = unproject(DepthMap.full(depth), k)
    idx = 256 * 512 + 256
    np.testing.assert_allclose(pc.points[idx], [0.0, 0.0, 2.0], atol=1e-12)


def test_unproject_off_axis_pixel():
    k = CameraIntrinsics(500.0, 500.0, 256.0, 256.0)
    depth = np.full((512, 512), 2.0, dtype=np.float32)
    pc = unproject(DepthMap.full(depth), k)
    idx = 256 * 512 + 356
    np.testing.assert_allclose(pc.points[idx], [0.4, 0.0, 2.0], rtol=1e-12)


def test_unproject_point_count_and_colors():
    rng = Rng(0)
    k = CameraIntrinsics(10, 10, 4, 4)
    depth = rng.uniform(1, 3, (8, 8)).astype(np.float32)
    valid = rng.uniform(size=(8, 8)) > 0.3
    rgb = ImageTensor(rng.uniform(0, 1, (3, 8, 8)).astype(np.float32))
    pc = unproject(DepthMap(np.where(valid, depth, 0), valid), k, rgb=rgb)
    assert len(pc) == int(valid.sum())
    assert pc.colors is not None and len(pc.colors) == len(pc)


def test_project_unproject_roundtrip():
    rng = Rng(1)
    k = CameraIntrinsics(320.0, 300.0, 31.5, 23.5)
    depth = rng.uniform(0.5, 8.0, (48, 64)).astype(np.float32)
    pc = unproject(DepthMap.full(depth), k)
    proj = project(pc, k)
    ys, xs = np.meshgrid(np.arange(48), np.arange(64), indexing="ij")
    np.testing.assert_allclose(proj[:, 0], xs.ravel(), rtol=0, atol=1e-9 * 64)
    np.testing.assert_allclose(proj[:, 1], ys.ravel(), rtol=0, atol=1e-9 * 48)
    np.testing.assert_allclose(proj[:, 2], depth.ravel(), rtol=1e-9)


def test_project_single_point():
    k = CameraIntrinsics(1.0, 1.0, 0.0, 0.0)
    out = project(PointCloud(np.array([[0.0, 0.0, 1.0]])), k)
    np.testing.assert_allclose(out[0], [0.0, 0.0, 1.0])


def test_project_nonpositive_z_flagged():
    k = CameraIntrinsics(1.0, 1.0, 0.0, 0.0)
    out = project(PointCloud(np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 2.0]])), k)
    assert np.isnan(out[0]).all() and not np.isnan(out[1]).any()


def test_unproject_scale_leaves_projection_fixed():
    rng = Rng(2)
    k = CameraIntrinsics(100.0, 90.0, 15.5, 15.5)
    depth = rng.uniform(1, 4, (16, 16)).astype(np.float32)
    d = DepthMap.full(depth)
    p1 = project(unproject(d, k, 1.0), k)
    p3 = project(unproject(d, k, 3.0), k)
    np.testing.assert_allclose(p1[:, :2], p3[:, :2], atol=1e-9)
    np.testing.assert_allclose(p3[:, 2], 3.0 * p1[:, 2], rtol=1e-12)


def test_spherical_principal_point_on_axis():
    k = CameraIntrinsics(100.0, 100.0, 2.0, 2.0)
    sph = to_spherical(DepthMap.full(np.full((5, 5), 2.0, dtype=np.float32)), k)
    assert sph[0, 2, 2] == 0.0 and sph[1, 2, 2] == 0.0
    np.testing.assert_allclose(sph[2, 2, 2], np.log(2.0))


def test_spherical_angles_depth_independent():
    rng = Rng(3)
    k = CameraIntrinsics(50.0, 60.0, 7.5, 7.5)
    d1 = DepthMap.full(rng.uniform(1, 5, (16, 16)).astype(np.float32))
    d2 = DepthMap.full(rng.uniform(1, 5, (16, 16)).astype(np.float32))
    s1, s2 = to_spherical(d1, k), to_spherical(d2, k)
    np.testing.assert_array_equal(s1[0], s2[0])
    np.testing.assert_array_equal(s1[1], s2[1])


def test_spherical_one_focal_length_right_of_center():
    k = CameraIntrinsics(10.0, 10.0, 0.0, 5.0)
    d = DepthMap.full(np.full((11, 11), 1.0, dtype=np.float32))
    sph = to_spherical(d, k)
    np.testing.assert_allclose(sph[0, 5, 10], np.pi / 4, rtol=1e-12)
    np.testing.assert_allclose(sph[1, 5, 10], 0.0, atol=1e-12)


def test_spherical_scaled_prediction_constant_log_offset():
    rng = Rng(4)
    k = CameraIntrinsics(40.0, 40.0, 7.5, 7.5)
    depth = rng.uniform(1, 4, (16, 16)).astype(np.float32)
    base = to_spherical(DepthMap.full(depth), k)
    scaled = to_spherical(DepthMap.full(2.0 * depth), k)
    eps = scaled - base
    np.testing.assert_array_equal(eps[0], 0.0)
    np.testing.assert_array_equal(eps[1], 0.0)
    np.testing.assert_allclose(eps[2], np.log(2.0), rtol=1e-6)


def test_spherical_linear_mode():
    k = CameraIntrinsics(10.0, 10.0, 1.0, 1.0)
    d = DepthMap.full(np.full((3, 3), 2.5, dtype=np.float32))
    sph = to_spherical(d, k, z_mode="linear")
    np.testing.assert_allclose(sph[2], 2.5)
