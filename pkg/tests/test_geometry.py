import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_pose
from mbvo.geometry import (
    AmbiguousLogError,
    BehindCameraError,
    CalibrationError,
    GeometryError,
    Intrinsics,
    InvalidDepthError,
    SE3Pose,
    backproject,
    hat,
    object_motion_global,
    predict_object_point,
    predict_static_point,
    project,
    recover_object_motion,
    rotation_angle,
    se3_exp,
    se3_hat,
    se3_log,
    so3_exp,
    so3_log,
)

UNIT = Intrinsics(1.0, 0.0, 0.0, 10, 10)

finite = st.floats(-2.0, 2.0, allow_nan=False)
twists = arrays(np.float64, 6, elements=finite)


def _expm_series(A, terms=40):
    out = np.eye(len(A))
    term = np.eye(len(A))
    for k in range(1, terms):
        term = term @ A / k
        out = out + term
    return out


class TestIntrinsics:
    def test_rejects_bad_focal(self):
        with pytest.raises(CalibrationError):
            Intrinsics(0.0, 1, 1, 10, 10)

    def test_fx_fy_must_agree(self):
        K = Intrinsics.from_fx_fy(721.5, 721.6, 300, 200, 640, 480)
        assert K.f == pytest.approx(721.55)
        with pytest.raises(CalibrationError):
            Intrinsics.from_fx_fy(721.5, 730.0, 300, 200, 640, 480)


class TestProjection:
    def test_backproject_examples(self):
        assert np.allclose(backproject((2, 1), 4, UNIT), (8, 4, 4))
        K = Intrinsics(500.0, 320.0, 240.0, 640, 480)
        assert np.allclose(backproject((320, 240), 7.5, K), (0, 0, 7.5))

    def test_backproject_kitti_like(self):
        K = Intrinsics(721.5, 609.6, 172.9, 1242, 375)
        # scalar evaluation by hand: (u - cu) d / f, (v - cv) d / f, d
        expected = (0.18582120582120545, 0.2403742203742203, 12.3)
        assert np.allclose(backproject((620.5, 187.0), 12.3, K), expected, rtol=0, atol=1e-12)

    def test_project_examples(self):
        assert np.allclose(project((0, 0, 5), UNIT), (0, 0))
        assert np.allclose(project((8, 4, 4), UNIT), (2, 1))

    def test_invalid_depth(self):
        with pytest.raises(InvalidDepthError):
            backproject([[1, 1], [2, 2]], [1.0, 0.0], UNIT)
        with pytest.raises(InvalidDepthError):
            backproject((1, 1), float("nan"), UNIT)

    def test_behind_camera(self):
        with pytest.raises(BehindCameraError):
            project((0, 0, -1), UNIT)

    def test_roundtrip_random(self, K, rng):
        z = rng.uniform(1, 50, 1000)
        m = np.column_stack([rng.uniform(-20, 20, 1000), rng.uniform(-5, 5, 1000), z])
        p = project(m, K)
        assert np.abs(project(backproject(p, z, K), K) - p).max() < 1e-9
        assert np.abs(backproject(p, z, K) - m).max() < 1e-9

    @given(u=st.floats(0, 639), v=st.floats(0, 479), d=st.floats(0.5, 80))
    def test_roundtrip_property(self, u, v, d):
        K = Intrinsics(721.5, 319.5, 239.5, 640, 480)
        assert np.allclose(project(backproject((u, v), d, K), K), (u, v), rtol=0, atol=1e-9)


class TestLie:
    def test_exp_simple_twists(self):
        assert se3_exp(np.zeros(6)).allclose(SE3Pose.identity(), atol=0)
        T = se3_exp([1, 0, 0, 0, 0, 0])
        assert np.allclose(T.rotation, np.eye(3)) and np.allclose(T.translation, (1, 0, 0))

    def test_exp_matches_power_series(self):
        xi = np.array([0.0, 0.0, 0.0, 0.0, 0.0, math.pi / 2])
        series = _expm_series(se3_hat(xi))
        assert np.allclose(se3_exp(xi).matrix(), series, atol=1e-12)
        assert np.allclose(series[:3, :3], [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)

    @given(twists)
    def test_exp_matches_series_property(self, xi):
        assert np.allclose(se3_exp(xi).matrix(), _expm_series(se3_hat(xi), 60), atol=1e-9)

    @given(twists)
    def test_log_inverts_exp(self, xi):
        if np.linalg.norm(xi[3:]) >= math.pi - 1e-6:
            return
        assert np.allclose(se3_log(se3_exp(xi)), xi, atol=1e-9)

    def test_small_angle_branch(self):
        xi = np.array([0.3, -0.1, 0.2, 1e-8, -2e-8, 5e-9])
        assert np.allclose(se3_exp(xi).matrix(), _expm_series(se3_hat(xi)), atol=1e-14)
        assert np.allclose(se3_log(se3_exp(xi)), xi, atol=1e-14)

    def test_log_near_pi(self):
        w = np.array([1.0, 2.0, -0.5])
        w = w / np.linalg.norm(w) * (math.pi - 1e-4)
        assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-7)
        with pytest.raises(AmbiguousLogError):
            so3_log(so3_exp([0, 0, math.pi]))

    def test_rotation_angle_small(self):
        assert rotation_angle(so3_exp([1e-9, 0, 0])) == pytest.approx(1e-9, rel=1e-6)
        assert rotation_angle(np.eye(3)) == 0.0

    def test_hat_is_cross(self, rng):
        a, b = rng.normal(size=3), rng.normal(size=3)
        assert np.allclose(hat(a) @ b, np.cross(a, b))

    def test_exp_output_is_valid_pose(self, rng):
        for _ in range(100):
            T = se3_exp(rng.normal(0, 3, 6))
            R = T.rotation
            assert np.abs(R.T @ R - np.eye(3)).max() < 1e-12
            assert abs(np.linalg.det(R) - 1) < 1e-12

    def test_long_composition_stays_on_manifold(self, rng):
        T = SE3Pose.identity()
        for _ in range(10_000):
            T = T @ random_pose(rng, rot=0.5, trans=0.1)
        R = T.rotation
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
        assert abs(np.linalg.det(R) - 1) < 1e-9


class TestPose:
    def test_rejects_non_rotation(self):
        with pytest.raises(GeometryError):
            SE3Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
        with pytest.raises(GeometryError):
            SE3Pose(np.eye(3) * 1.01, np.zeros(3))

    def test_arrays_are_read_only(self):
        T = SE3Pose.identity()
        with pytest.raises(ValueError):
            T.translation[0] = 1.0

    def test_inverse_and_compose(self, rng):
        A, B = random_pose(rng), random_pose(rng)
        assert (A @ A.inverse()).allclose(SE3Pose.identity(), atol=1e-12)
        p = rng.normal(size=(5, 3))
        assert np.allclose((A @ B).apply(p), A.apply(B.apply(p)))

    def test_from_matrix_normalize(self, rng):
        M = random_pose(rng).matrix()
        M[:3, :3] += 1e-6
        with pytest.raises(GeometryError):
            SE3Pose.from_matrix(M)
        T = SE3Pose.from_matrix(M, normalize=True)
        assert np.abs(T.rotation.T @ T.rotation - np.eye(3)).max() < 1e-12


class TestMotionModels:
    def test_static_prediction_examples(self):
        K = Intrinsics(100.0, 0.0, 0.0, 10, 10)
        T = SE3Pose.from_translation((0, 0, 1))
        assert np.allclose(predict_static_point((0, 0, 10), T, K), (0, 0))
        assert np.allclose(predict_static_point((1, 0, 10), T, K), (100 / 9, 0))
        m = np.array([0.3, -0.2, 6.0])
        assert np.allclose(predict_static_point(m, SE3Pose.identity(), K), project(m, K))

    def test_object_prediction_examples(self):
        K = Intrinsics(100.0, 0.0, 0.0, 10, 10)
        X = SE3Pose.from_translation((0, 0, -1))
        assert np.allclose(predict_object_point((1, 0, 10), X, K), (100 / 9, 0))
        m = np.array([0.3, -0.2, 6.0])
        assert np.allclose(predict_object_point(m, SE3Pose.identity(), K), project(m, K))

    def test_predictions_match_composition(self, K, rng):
        for _ in range(20):
            T = random_pose(rng, rot=0.05, trans=0.3)
            m = np.array([rng.uniform(-3, 3), rng.uniform(-2, 2), rng.uniform(8, 30)])
            assert np.allclose(predict_static_point(m, T, K), project(T.inverse().apply(m), K), atol=1e-9)
            assert np.allclose(predict_object_point(m, T, K), project(T.apply(m), K), atol=1e-9)

    def test_recover_object_motion(self, rng):
        T, X = random_pose(rng), random_pose(rng)
        assert recover_object_motion(T, SE3Pose.identity()).allclose(T)
        assert recover_object_motion(SE3Pose.identity(), X).allclose(X)
        # a point moved by H and seen from the new camera is X applied to it
        m = rng.normal(size=(4, 3))
        H = recover_object_motion(T, X)
        assert np.allclose(T.inverse().apply(H.apply(m)), X.apply(m))

    def test_global_motion(self, rng):
        L, Hb = random_pose(rng), random_pose(rng)
        assert object_motion_global(SE3Pose.identity(), Hb).allclose(Hb)
        assert object_motion_global(L, SE3Pose.identity()).allclose(SE3Pose.identity())
        # body points: the global motion carries every point to its next position
        body = rng.normal(size=(10, 3))
        H = object_motion_global(L, Hb)
        before, after = L.apply(body), (L @ Hb).apply(body)
        assert np.abs(H.apply(before) - after).max() < 1e-12
        assert H.rotation_angle() == pytest.approx(Hb.rotation_angle(), abs=1e-12)
