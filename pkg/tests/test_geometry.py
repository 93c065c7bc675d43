import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splat4d.geometry import (CameraFrame, RigidPose, depth_map_to_points, plucker_image,
                              plucker_ray, pose_compose, pose_interpolate, project_point,
                              project_points, quat_from_axis_angle, quat_multiply, quat_slerp,
                              quat_to_rotmat, rotmat_to_quat, unproject_pixel, unproject_pixels)

from conftest import random_camera


def random_pose(rng):
    return RigidPose(rng.normal(size=4), rng.normal(size=3) * 5)


def test_compose_identity():
    p = pose_compose(RigidPose.identity(), RigidPose.identity())
    assert np.allclose(p.matrix(), np.eye(4))


def test_compose_inverse(rng):
    for _ in range(50):
        p = random_pose(rng)
        assert np.abs((p @ p.inverse()).matrix() - np.eye(4)).max() < 1e-9
        assert np.abs((p.inverse() @ p).matrix() - np.eye(4)).max() < 1e-9


def test_compose_translations():
    p = RigidPose.from_translation([1, 0, 0]) @ RigidPose.from_translation([0, 2, 0])
    assert np.allclose(p.translation, [1, 2, 0])
    assert np.allclose(p.rotation, [1, 0, 0, 0])


def test_compose_matches_matrix_product(rng):
    a, b = random_pose(rng), random_pose(rng)
    assert np.allclose((a @ b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)


def test_quaternion_matrix_round_trip(rng):
    for _ in range(100):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        R = quat_to_rotmat(q)
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.isclose(np.linalg.det(R), 1.0)
        q2 = rotmat_to_quat(R)
        assert min(np.abs(q2 - q).max(), np.abs(q2 + q).max()) < 1e-9


def test_quat_multiply_is_rotation_composition(rng):
    a, b = rng.normal(size=4), rng.normal(size=4)
    a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
    assert np.allclose(quat_to_rotmat(quat_multiply(a, b)), quat_to_rotmat(a) @ quat_to_rotmat(b))


def test_axis_angle():
    q = quat_from_axis_angle(np.array([0, 0, np.pi / 2]))
    assert np.allclose(quat_to_rotmat(q) @ [1, 0, 0], [0, 1, 0])
    assert np.allclose(quat_from_axis_angle(np.zeros(3)), [1, 0, 0, 0])


def test_slerp_endpoints_and_midpoint():
    q0 = np.array([1.0, 0, 0, 0])
    q1 = quat_from_axis_angle(np.array([0, np.pi / 2, 0]))
    assert np.allclose(quat_slerp(q0, q1, 0), q0)
    assert np.allclose(quat_slerp(q0, q1, 1), q1)
    assert np.allclose(quat_slerp(q0, q1, 0.5), quat_from_axis_angle(np.array([0, np.pi / 4, 0])))


def test_pose_interpolate_translation():
    a, b = RigidPose.from_translation([0, 0, 0]), RigidPose.from_translation([2, 4, 0])
    assert np.allclose(pose_interpolate(a, b, 0.25).translation, [0.5, 1, 0])


def test_from_matrix_rejects_non_orthonormal():
    T = np.eye(4)
    T[0, 0] = 1.01
    with pytest.raises(ValueError):
        RigidPose.from_matrix(T)


def test_project_on_axis():
    cam = CameraFrame.from_pose(100, 100, 32, 24, 64, 48, RigidPose.identity())
    uv, d, ok = project_point(np.array([0, 0, 7.0]), cam)
    assert ok and np.allclose(uv, [32, 24]) and d == 7.0


def test_project_unproject_round_trip(rng):
    for _ in range(20):
        cam = random_camera(rng)
        u = rng.uniform(0, 32, 2)
        d = rng.uniform(0.5, 50)
        uv, z, ok = project_point(unproject_pixel(u, d, cam), cam)
        assert ok and np.abs(uv - u).max() < 1e-6 and abs(z - d) < 1e-9


def test_project_vs_homogeneous_matrix(rng):
    cam = random_camera(rng)
    pts = rng.normal(size=(200, 3)) * 4
    uv, z, ok = project_points(pts, cam)
    P = np.hstack([cam.intrinsics, np.zeros((3, 1))]) @ cam.extrinsics
    hom = np.hstack([pts, np.ones((200, 1))]) @ P.T
    ref = hom[:, :2] / hom[:, 2:]
    assert np.abs(uv[ok] - ref[ok]).max() < 1e-9
    assert np.all(np.isnan(uv[~ok]))


def test_unproject_principal_point():
    cam = CameraFrame.look_at([1, 2, 3], [4, 2, 3], 50, 50, 40, 30)
    x = unproject_pixel(np.array([20.0, 15.0]), 5.0, cam)
    assert np.allclose(x, cam.center + 5 * cam.forward)


def test_unproject_full_image_round_trip(rng):
    cam = random_camera(rng)
    jj, ii = np.meshgrid(np.arange(32) + 0.5, np.arange(24) + 0.5)
    uv = np.stack([jj.ravel(), ii.ravel()], 1)
    pts = unproject_pixels(uv, np.ones(len(uv)), cam)
    # back into camera space: z must be exactly the depth
    pc = cam.world_to_camera(pts)
    assert np.abs(pc[:, 2] - 1).max() < 1e-6
    uv2, _, _ = project_points(pts, cam)
    assert np.abs(uv2 - uv).max() < 1e-6


def test_depth_map_frustum_slice():
    cam = CameraFrame.from_pose(100, 100, 2, 2, 4, 4, RigidPose.identity())
    pts, (rows, cols) = depth_map_to_points(np.full((4, 4), 10.0), cam)
    assert len(pts) == 16
    for p, r, c in zip(pts, rows, cols):
        # closed form: x = (u - cx) z / fx
        assert np.allclose(p, [(c + 0.5 - 2) * 10 / 100, (r + 0.5 - 2) * 10 / 100, 10.0])


def test_depth_map_skips_invalid():
    cam = CameraFrame.from_pose(100, 100, 2, 2, 4, 4, RigidPose.identity())
    d = np.full((4, 4), 3.0)
    d[1, 2] = 0
    pts, _ = depth_map_to_points(d, cam)
    assert len(pts) == 15


def test_plucker_origin_camera():
    cam = CameraFrame.from_pose(60, 60, 16, 12, 32, 24, RigidPose(quat_from_axis_angle(np.array([0.1, 0.2, 0]))))
    m, d = plucker_image(cam)
    assert np.abs(m).max() == 0
    assert np.allclose(np.linalg.norm(d, axis=-1), 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_plucker_moment_orthogonal(seed):
    rng = np.random.default_rng(seed)
    cam = random_camera(rng)
    m, d = plucker_ray(rng.uniform(0, 32, 2), cam)
    assert abs(np.linalg.norm(d) - 1) < 1e-12
    assert abs(m @ d) < 1e-9


def test_plucker_ray_hits_pixel(rng):
    cam = random_camera(rng)
    u = np.array([7.3, 11.9])
    _, d = plucker_ray(u, cam)
    uv, _, ok = project_point(cam.center + 3.0 * d, cam)
    assert ok and np.allclose(uv, u)


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraFrame(np.eye(3) * [1, -1, 1], np.eye(4), 4, 4)
    T = np.eye(4)
    T[0, 1] = 0.5
    with pytest.raises(ValueError):
        CameraFrame(np.diag([10.0, 10, 1]), T, 4, 4)


def test_camera_scaled():
    cam = CameraFrame.from_pose(100, 80, 32, 24, 64, 48, RigidPose.identity())
    s = cam.scaled(0.5)
    assert (s.width, s.height) == (32, 24) and s.fx == 50 and s.cy == 12


def test_camera_immutable():
    cam = CameraFrame.from_pose(100, 80, 32, 24, 64, 48, RigidPose.identity())
    with pytest.raises(ValueError):
        cam.intrinsics[0, 0] = 5
