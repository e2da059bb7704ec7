import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_points, random_pose
from mbvo.geometry import Intrinsics, project
from mbvo.p3p import p3p_grunert, ransac_absolute_pose, reprojection_errors, rigid_fit

K = Intrinsics(721.5, 319.5, 239.5, 640, 480)


def bearings(q):
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def test_rigid_fit_exact(rng):
    Q = random_pose(rng, rot=1.0, trans=3.0)
    src = rng.normal(size=(20, 3))
    assert rigid_fit(src, Q.apply(src)).allclose(Q, atol=1e-12)


def test_rigid_fit_never_reflects(rng):
    src = rng.normal(size=(10, 3))
    dst = src * np.array([1, 1, -1])
    assert np.linalg.det(rigid_fit(src, dst).rotation) > 0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_grunert_contains_truth(seed):
    rng = np.random.default_rng(seed)
    Q = random_pose(rng, rot=0.3, trans=1.0)
    P = random_points(rng, 3, K, 4, 30)
    q = Q.apply(P)
    if np.any(q[:, 2] <= 0.5):
        return
    sols = p3p_grunert(P, bearings(q))
    assert 1 <= len(sols) <= 4
    best = min(np.abs(s.matrix() - Q.matrix()).max() for s in sols)
    assert best < 1e-6


def test_grunert_degenerate():
    P = np.array([[0, 0, 5.0], [0, 0, 5.0], [1, 0, 5.0]])
    assert p3p_grunert(P, bearings(P)) == []


def test_reprojection_errors_behind_camera(rng):
    from mbvo.geometry import SE3Pose
    pts = np.array([[0, 0, 5.0], [0, 0, -5.0]])
    err = reprojection_errors(SE3Pose.identity(), pts, np.array([[K.cu, K.cv]] * 2), K)
    assert err[0] == pytest.approx(0) and np.isinf(err[1])


def test_ransac_rejects_outliers(rng):
    Q = random_pose(rng, rot=0.1, trans=0.5)
    P = random_points(rng, 400, K)
    obs = project(Q.apply(P), K)
    bad = rng.random(400) < 0.4
    obs[bad] += rng.uniform(-50, 50, (bad.sum(), 2))
    Qh, mask = ransac_absolute_pose(P, obs, K, np.random.default_rng(3))
    assert np.abs(Qh.matrix() - Q.matrix()).max() < 1e-6
    far = np.linalg.norm(obs - project(Q.apply(P), K), axis=1) > 2
    assert not (mask & far).any() and mask[~bad].all()


def test_ransac_too_few_points(rng):
    P = random_points(rng, 3, K)
    assert ransac_absolute_pose(P, project(P, K), K, rng) is None


def test_ransac_deterministic_given_rng(rng):
    P = random_points(rng, 100, K)
    obs = project(P, K) + rng.normal(0, 0.5, (100, 2))
    a = ransac_absolute_pose(P, obs, K, np.random.default_rng(9))
    b = ransac_absolute_pose(P, obs, K, np.random.default_rng(9))
    assert np.array_equal(a[0].matrix(), b[0].matrix()) and np.array_equal(a[1], b[1])
