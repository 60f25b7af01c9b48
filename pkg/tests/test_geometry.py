"""Geometry core: poses, projection, error metrics.

Oracles used here are independent of the implementation: homogeneous
4x4 matrix algebra for compose/inverse, the hand-written pinhole
formula for projection, and scipy's quaternion machinery for rotation
angles.
"""

import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import random_pose
from vloc.errors import BehindCameraError, NonPositiveDepthError
from vloc.geometry import (Intrinsics, Pose, axis_angle_matrix, backproject,
                           backproject_many, compose, inverse, look_pose,
                           pose_error, pose_from_string, pose_to_string,
                           project, project_many)

K = Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)


class TestCompose:
    def test_identity_left(self):
        rng = np.random.default_rng(0)
        p = random_pose(rng)
        out = compose(Pose.identity(), p)
        np.testing.assert_allclose(out.matrix(), p.matrix(), atol=1e-15)

    def test_inverse_right(self):
        rng = np.random.default_rng(1)
        p = random_pose(rng)
        out = compose(p, inverse(p))
        np.testing.assert_allclose(out.matrix(), np.eye(4), atol=1e-12)

    def test_matches_homogeneous_product(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a, b = random_pose(rng), random_pose(rng)
            expected = a.matrix() @ b.matrix()
            np.testing.assert_allclose(compose(a, b).matrix(), expected,
                                       atol=1e-12)

    def test_long_chain_stays_orthonormal(self):
        rng = np.random.default_rng(3)
        acc = Pose.identity()
        for _ in range(1000):
            acc = compose(acc, random_pose(rng))
        assert acc.orthonormality_drift() < 1e-9


class TestInverse:
    def test_identity(self):
        out = inverse(Pose.identity())
        np.testing.assert_allclose(out.matrix(), np.eye(4), atol=0)

    def test_pure_translation(self):
        p = Pose(np.eye(3), [0.0, 0.0, 1.0])
        np.testing.assert_allclose(inverse(p).translation, [0, 0, -1])

    def test_matches_matrix_inverse(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            p = random_pose(rng)
            np.testing.assert_allclose(inverse(p).matrix(),
                                       np.linalg.inv(p.matrix()), atol=1e-12)


class TestProject:
    def test_principal_axis(self):
        pixel, depth = project(K, Pose.identity(), [0.0, 0.0, 2.0])
        np.testing.assert_allclose(pixel, [50.0, 50.0])
        assert depth == 2.0

    def test_pinhole_formula_by_hand(self):
        # x=1, z=2 -> u = 100 * 1/2 + 50 = 100
        pixel, depth = project(K, Pose.identity(), [1.0, 0.0, 2.0])
        np.testing.assert_allclose(pixel, [100.0, 50.0])
        assert depth == 2.0

    def test_behind_camera(self):
        with pytest.raises(BehindCameraError):
            project(K, Pose.identity(), [0.0, 0.0, -1.0])

    def test_project_many_matches_scalar(self):
        rng = np.random.default_rng(5)
        pose = random_pose(rng)
        pts = rng.uniform(-3, 3, (50, 3))
        pixels, depths, in_front = project_many(K, pose, pts)
        for i in range(50):
            if in_front[i]:
                pix, dep = project(K, pose, pts[i])
                np.testing.assert_allclose(pixels[i], pix, atol=1e-12)
                assert depths[i] == pytest.approx(dep)


class TestBackproject:
    def test_roundtrip_1000(self):
        rng = np.random.default_rng(6)
        pose = random_pose(rng)
        worst = 0.0
        for _ in range(1000):
            pixel = rng.uniform(0, 100, 2)
            depth = rng.uniform(0.1, 20.0)
            world = backproject(K, pose, pixel, depth)
            pix2, dep2 = project(K, pose, world)
            worst = max(worst, abs(dep2 - depth), *np.abs(pix2 - pixel))
        assert worst < 1e-9

    def test_principal_point(self):
        world = backproject(K, Pose.identity(), [50.0, 50.0], 3.0)
        np.testing.assert_allclose(world, [0, 0, 3], atol=1e-15)

    def test_matches_explicit_ray_oracle(self):
        rng = np.random.default_rng(7)
        pose = random_pose(rng)
        pixel = np.array([72.0, 31.0])
        depth = 4.2
        # Oracle: explicit ray construction through the camera center.
        ray_cam = np.array([(pixel[0] - K.cx) / K.fx,
                            (pixel[1] - K.cy) / K.fy, 1.0])
        expected = pose.rotation.T @ (ray_cam * depth - pose.translation)
        np.testing.assert_allclose(backproject(K, pose, pixel, depth),
                                   expected, atol=1e-12)

    def test_nonpositive_depth(self):
        with pytest.raises(NonPositiveDepthError):
            backproject(K, Pose.identity(), [50.0, 50.0], 0.0)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(8)
        pose = random_pose(rng)
        pixels = rng.uniform(0, 100, (30, 2))
        depths = rng.uniform(0.5, 10, 30)
        batch = backproject_many(K, pose, pixels, depths)
        for i in range(30):
            np.testing.assert_allclose(
                batch[i], backproject(K, pose, pixels[i], depths[i]),
                atol=1e-12)


class TestPoseError:
    def test_zero_for_identical(self):
        rng = np.random.default_rng(9)
        p = random_pose(rng)
        err = pose_error(p, p)
        assert err.translation_error == 0.0
        assert err.rotation_error == pytest.approx(0.0, abs=1e-6)

    def test_antipodal_rotation(self):
        rot = axis_angle_matrix([0, 1, 0], math.pi)
        a = Pose(np.eye(3), np.zeros(3))
        b = Pose(rot, np.zeros(3))
        err = pose_error(a, b)
        assert err.translation_error == pytest.approx(0.0)
        assert err.rotation_error == pytest.approx(180.0)

    def test_matches_quaternion_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            a, b = random_pose(rng), random_pose(rng)
            err = pose_error(a, b)
            qa = Rotation.from_matrix(a.rotation).as_quat()
            qb = Rotation.from_matrix(b.rotation).as_quat()
            dot = min(1.0, abs(float(np.dot(qa, qb))))
            expected = math.degrees(2.0 * math.acos(dot))
            assert err.rotation_error == pytest.approx(expected, abs=1e-9)
            expected_t = np.linalg.norm(a.camera_center - b.camera_center)
            assert err.translation_error == pytest.approx(expected_t)

    def test_symmetry(self):
        rng = np.random.default_rng(11)
        a, b = random_pose(rng), random_pose(rng)
        ab, ba = pose_error(a, b), pose_error(b, a)
        assert ab.translation_error == pytest.approx(ba.translation_error)
        assert ab.rotation_error == pytest.approx(ba.rotation_error)

    def test_continuity_at_small_perturbation(self):
        rng = np.random.default_rng(12)
        p = random_pose(rng)
        eps = 1e-6
        delta = Pose(axis_angle_matrix([0, 0, 1], eps), [eps, 0, 0])
        err = pose_error(p, compose(delta, p))
        assert err.translation_error < 1e-4
        assert err.rotation_error < 1e-3


class TestPoseString:
    def test_roundtrip_exact(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            p = random_pose(rng)
            q = pose_from_string(pose_to_string(p))
            assert np.array_equal(p.rotation, q.rotation)
            assert np.array_equal(p.translation, q.translation)

    def test_twelve_fields(self):
        assert len(pose_to_string(Pose.identity()).split()) == 12

    def test_rejects_wrong_count(self):
        with pytest.raises(ValueError):
            pose_from_string("1 2 3")


class TestLookPose:
    def test_yaw_zero_looks_along_x(self):
        p = look_pose([0, 0, 1.5], 0.0)
        np.testing.assert_allclose(p.rotation[2], [1, 0, 0], atol=1e-15)
        np.testing.assert_allclose(p.camera_center, [0, 0, 1.5], atol=1e-12)

    def test_rotation_is_orthonormal(self):
        for yaw in np.linspace(0, 2 * math.pi, 7):
            for pitch in (-0.4, 0.0, 0.3):
                p = look_pose([1, 2, 1.4], yaw, pitch)
                assert p.orthonormality_drift() < 1e-12
                assert np.linalg.det(p.rotation) == pytest.approx(1.0)
