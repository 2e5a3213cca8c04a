import numpy as np
import pytest

from affordkit.maskops import BinaryMask, SizeMismatch
from affordkit.projection import (
    AffordanceCloud,
    BehindCamera,
    CameraExtrinsics,
    CameraIntrinsics,
    DepthImage,
    InvalidDepth,
    backproject_masked,
    backproject_pixel,
    check_rigid,
    load_depth_png,
    NonRigidTransform,
    project_point,
    save_depth_png,
)

from conftest import random_rigid

K500 = CameraIntrinsics(500.0, 500.0, 320.0, 240.0)
I = CameraExtrinsics.identity()


def matrix_oracle(u, v, d, K, T):
    """The lifting written out as 4x4 matrix products."""
    h = T.matrix @ np.linalg.inv(K.matrix) @ np.array([u * d, v * d, d, 1.0])
    return h[:3] / h[3]


def test_identity_camera():
    K = CameraIntrinsics(1, 1, 0, 0)
    np.testing.assert_array_equal(backproject_pixel(0, 0, 1, K, I), [0, 0, 1])


def test_principal_point_on_optical_axis():
    np.testing.assert_array_equal(backproject_pixel(320, 240, 2, K500, I), [0, 0, 2])


def test_off_axis_pixel_against_matrix_oracle():
    expected = matrix_oracle(820, 240, 1, K500, I)
    np.testing.assert_allclose(expected, [1, 0, 1], atol=1e-12)
    np.testing.assert_allclose(backproject_pixel(820, 240, 1, K500, I), expected, atol=1e-12)


def test_random_pixels_against_matrix_oracle(rng):
    for _ in range(50):
        K = CameraIntrinsics(*rng.uniform(200, 900, 2), *rng.uniform(100, 400, 2))
        T = CameraExtrinsics.from_matrix(random_rigid(rng))
        u, v, d = rng.uniform(0, 640), rng.uniform(0, 480), rng.uniform(0.2, 5)
        np.testing.assert_allclose(backproject_pixel(u, v, d, K, T), matrix_oracle(u, v, d, K, T), atol=1e-9)


@pytest.mark.parametrize("d", [0.0, -1.0, float("nan"), float("inf")])
def test_invalid_depth(d):
    with pytest.raises(InvalidDepth):
        backproject_pixel(1, 1, d, K500, I)


def test_project_round_trip_fixture(rng):
    K = CameraIntrinsics(610.0, 605.0, 318.5, 243.2)
    T = CameraExtrinsics.from_matrix(random_rigid(rng))
    u, v, d = project_point(*backproject_pixel(100, 50, 1.5, K, T), K, T)
    np.testing.assert_allclose([u, v, d], [100, 50, 1.5], rtol=1e-6)


def test_project_optical_axis():
    assert project_point(0, 0, 3, K500, I) == pytest.approx((320, 240, 3))


def test_behind_camera():
    with pytest.raises(BehindCamera):
        project_point(0, 0, -1, K500, I)


def _fixture_4x4():
    mask = np.zeros((4, 4), bool)
    mask[0, 1] = mask[2, 3] = mask[3, 0] = True
    depth = np.full((4, 4), 2.0)
    depth[2, 3] = 0.0  # invalid
    return BinaryMask(mask), DepthImage.from_array(depth)


def test_masked_fixture():
    K = CameraIntrinsics(2.0, 2.0, 1.5, 1.5)
    mask, depth = _fixture_4x4()
    cloud = backproject_masked(mask, depth, K, I)
    # row-major grid order: (u=1, v=0) then (u=0, v=3)
    np.testing.assert_array_equal(cloud.source_pixels, [[1, 0], [0, 3]])
    np.testing.assert_allclose(cloud.points, [[(1 - 1.5), (0 - 1.5), 2.0], [(0 - 1.5), (3 - 1.5), 2.0]])
    for (u, v), p in zip(cloud.source_pixels, cloud.points):
        np.testing.assert_allclose(p, backproject_pixel(u, v, 2.0, K, I))


def test_masked_empty_and_full():
    depth = DepthImage.from_array(np.ones((3, 5)))
    assert len(backproject_masked(BinaryMask.zeros(3, 5), depth, K500, I)) == 0
    assert len(backproject_masked(BinaryMask(np.ones((3, 5))), depth, K500, I)) == 15


def test_masked_follows_point_order():
    depth = DepthImage.from_array(np.ones((3, 3)))
    P = [(2, 2), (0, 0), (1, 2)]
    cloud = backproject_masked(BinaryMask(np.ones((3, 3))), depth, K500, I, points=P)
    np.testing.assert_array_equal(cloud.source_pixels, P)


def test_masked_size_mismatch():
    with pytest.raises(SizeMismatch):
        backproject_masked(BinaryMask.zeros(3, 3), DepthImage.from_array(np.ones((3, 4))), K500, I)


def test_cardinality_property(rng):
    for _ in range(20):
        m = rng.random((12, 9)) < 0.4
        d = rng.uniform(0.1, 3, (12, 9))
        d[rng.random((12, 9)) < 0.3] = 0.0
        d[rng.random((12, 9)) < 0.05] = np.nan
        cloud = backproject_masked(BinaryMask(m), DepthImage.from_array(d), K500, I)
        assert len(cloud) == int(np.sum(m & np.isfinite(d) & (d > 0)))
        assert np.all(np.isfinite(cloud.points))


def test_depth_linearity(rng):
    d = rng.uniform(0.2, 2, (6, 7))
    m = BinaryMask(np.ones((6, 7)))
    a = backproject_masked(m, DepthImage.from_array(d), K500, I)
    b = backproject_masked(m, DepthImage.from_array(3.5 * d), K500, I)
    np.testing.assert_allclose(b.points, 3.5 * a.points, rtol=1e-12)


def test_extrinsics_validation():
    bad = np.eye(4)
    bad[0, 1] = 0.1
    assert CameraExtrinsics.from_matrix(bad).problems()
    flip = np.diag([1.0, 1.0, -1.0, 1.0])
    assert any("determinant" in p for p in CameraExtrinsics.from_matrix(flip).problems())
    with pytest.raises(NonRigidTransform):
        check_rigid(flip)
    assert CameraIntrinsics(0, 1, 0, 0).problems()


def test_depth_png_millimetres(tmp_path):
    d = np.array([[0.0, 1.234], [0.5, 65.535]])
    save_depth_png(d, tmp_path / "d.png")
    from PIL import Image

    with Image.open(tmp_path / "d.png") as im:
        raw = np.asarray(im)
    np.testing.assert_array_equal(raw, [[0, 1234], [500, 65535]])
    img = load_depth_png(tmp_path / "d.png")
    np.testing.assert_allclose(img.depth, [[0, 1.234], [0.5, 65.535]])
    np.testing.assert_array_equal(img.validity, [[False, True], [True, True]])


def test_cloud_lengths_must_match():
    with pytest.raises(ValueError):
        AffordanceCloud(np.zeros((2, 3)), np.zeros((3, 2), dtype=int))
