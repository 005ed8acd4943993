import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from salient_odometry.errors import ConfigurationError, PointStatusError, PreconditionError
from salient_odometry.geometry import (
    CameraIntrinsics,
    InverseDepthPoint,
    PointStatus,
    Pose,
    build_pyramid,
    interpolate_bilinear,
    project,
    project_points,
    relative_pose,
)


def test_exp_log_inverse(rng):
    for _ in range(20):
        xi = rng.normal(scale=0.5, size=6)
        assert np.allclose(Pose.exp(xi).log(), xi, atol=1e-9)


def test_exp_small_angle():
    xi = np.array([0.1, -0.2, 0.3, 1e-10, 0.0, 0.0])
    pose = Pose.exp(xi)
    assert np.allclose(pose.translation, xi[:3], atol=1e-9)


def test_inverse_compose_is_identity(rng):
    pose = Pose.exp(rng.normal(size=6))
    assert pose.compose(pose.inverse()).is_close(Pose.identity(), 1e-9)


def test_quaternion_round_trip(rng):
    pose = Pose.exp(rng.normal(size=6))
    rebuilt = Pose.from_quaternion(pose.quaternion(), pose.translation)
    assert rebuilt.is_close(pose, 1e-9)
    assert pose.quaternion()[3] >= 0


def test_non_orthonormal_rotation_rejected():
    with pytest.raises(PreconditionError):
        Pose(np.diag([1.0, 1.0, 2.0]), np.zeros(3))


def test_bad_intrinsics_rejected():
    with pytest.raises(ConfigurationError):
        CameraIntrinsics(fx=-1.0, fy=1.0, cx=5, cy=5, width=10, height=10)
    with pytest.raises(ConfigurationError):
        CameraIntrinsics(fx=1.0, fy=1.0, cx=12, cy=5, width=10, height=10)


def test_identity_projection_returns_same_pixel(camera):
    point = InverseDepthPoint(0, 0, 40.0, 30.0, idepth=0.5)
    projection = project(point, Pose.identity(), Pose.identity(), camera)
    assert projection is not None
    assert projection.u == pytest.approx(40.0)
    assert projection.v == pytest.approx(30.0)
    assert projection.idepth == pytest.approx(0.5)


def test_projection_matches_direct_computation(camera):
    target = Pose(Rotation.from_euler("y", 5, degrees=True).as_matrix(), np.zeros(3))
    point = InverseDepthPoint(0, 0, 97.3, 41.8, idepth=0.4)

    # independent pinhole computation
    K = camera.matrix()
    world = np.linalg.inv(K) @ np.array([97.3, 41.8, 1.0]) / 0.4
    in_target = target.rotation.T @ world
    expected = K @ (in_target / in_target[2])

    projection = project(point, Pose.identity(), target, camera)
    assert projection is not None
    assert projection.u == pytest.approx(expected[0], abs=1e-9)
    assert projection.v == pytest.approx(expected[1], abs=1e-9)
    assert projection.idepth == pytest.approx(1.0 / in_target[2], abs=1e-12)


def test_point_behind_camera_is_invalid(camera):
    host = Pose.identity()
    target = Pose(np.eye(3), np.array([0.0, 0.0, 5.0]))
    point = InverseDepthPoint(0, 0, 80.0, 60.0, idepth=0.5)
    assert project(point, host, target, camera) is None


def test_projection_margin(camera):
    target_from_host = Pose.identity()
    u = np.array([0.5, 1.0, 158.0, 80.0])
    v = np.array([60.0, 60.0, 60.0, 118.6])
    projected = project_points(target_from_host, camera, u, v, np.ones(4), margin=1.0)
    assert projected.valid.tolist() == [False, True, True, False]
    unbounded = project_points(target_from_host, camera, u, v, np.ones(4), margin=None)
    assert unbounded.valid.all()


def test_point_at_infinity_follows_rotation(camera):
    target_from_host = Pose(np.eye(3), np.array([1.0, 0.0, 0.0]))
    projected = project_points(target_from_host, camera, np.array([50.0]), np.array([20.0]), np.zeros(1))
    assert projected.u[0] == pytest.approx(50.0)
    assert projected.v[0] == pytest.approx(20.0)


def test_relative_pose_composition(rng):
    host = Pose.exp(rng.normal(size=6))
    target = Pose.exp(rng.normal(size=6))
    assert target.compose(relative_pose(host, target)).is_close(host, 1e-9)


def test_pyramid_sizes_and_gradients():
    image = np.tile(np.arange(64, dtype=np.float64), (48, 1))
    pyramid = build_pyramid(image, 3)
    assert pyramid.num_levels == 3
    assert (pyramid[1].width, pyramid[1].height) == (32, 24)
    assert (pyramid[2].width, pyramid[2].height) == (16, 12)
    assert np.allclose(pyramid[0].grad_x, 1.0)
    assert np.allclose(pyramid[0].grad_y, 0.0)
    assert np.allclose(pyramid[1].grad_x, 2.0)


def test_pyramid_too_small():
    with pytest.raises(ConfigurationError):
        build_pyramid(np.zeros((6, 6)), 4)


def test_scaled_intrinsics_keep_pixel_centres(camera):
    half = camera.scaled(1)
    assert half.fx == pytest.approx(60.0)
    assert half.cx == pytest.approx((79.5 + 0.5) / 2 - 0.5)
    assert (half.width, half.height) == (80, 60)


def test_interpolation_inside_and_outside():
    grid = np.array([[0.0, 10.0], [20.0, 30.0]])
    assert interpolate_bilinear(grid, 0.5, 0.5) == pytest.approx(15.0)
    assert interpolate_bilinear(grid, 1.0, 0.0) == pytest.approx(10.0)
    with pytest.raises(PreconditionError):
        interpolate_bilinear(grid, 1.5, 0.0)


def test_point_lifecycle():
    point = InverseDepthPoint(7, 0, 10.0, 10.0)
    assert point.status is PointStatus.CANDIDATE
    with pytest.raises(PointStatusError):
        point.transition(PointStatus.MARGINALIZED)
    point.activate(0.8)
    assert point.is_active and point.idepth == 0.8
    point.transition(PointStatus.MARGINALIZED)
    with pytest.raises(PointStatusError):
        point.transition(PointStatus.ACTIVE)
    point.mark_outlier()
    assert point.status is PointStatus.OUTLIER


def test_activation_requires_positive_idepth():
    point = InverseDepthPoint(1, 0, 10.0, 10.0)
    with pytest.raises(PreconditionError):
        point.activate(0.0)
    assert point.status is PointStatus.CANDIDATE
