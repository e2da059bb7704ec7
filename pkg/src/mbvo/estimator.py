"""Robust motion estimation from 3D-2D flow correspondences.

Three problems share one Levenberg-Marquardt engine:

* camera motion: minimize the Huber-robustified re-projection error of
  static points predicted with ``T^-1 m``;
* object motion: the same residual with the object prediction ``X m``;
* joint refinement: additionally treat every correspondence's flow as a
  variable tied to its measurement by a second robustified prior term.

The joint normal equations have arrowhead structure (each 2-dof flow block
couples only to the 6-dof twist), so the flow blocks are eliminated with a
Schur complement and a step costs O(n).

Perturbations: the camera pose is updated as ``T exp(d)``, an object
motion as ``exp(d) X``. Jacobians returned by :func:`reprojection_residuals`
are with respect to ``d`` at ``d = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Literal, Sequence

import numpy as np

from .geometry import Intrinsics, SE3Pose, backproject, se3_exp
from .p3p import ransac_absolute_pose, reprojection_errors

Kind = Literal["camera", "object"]


class EstimationError(RuntimeError):
    """Estimation failed; ``last_state`` holds the last valid motion."""

    def __init__(self, message, last_state: SE3Pose | None = None):
        super().__init__(message)
        self.last_state = last_state


class UnderdeterminedError(EstimationError):
    pass


class InitFailedError(EstimationError):
    pass


@dataclass
class Correspondences:
    """Batch of frame k-1 points with their measured flow into frame k."""

    p_prev: np.ndarray
    m_prev: np.ndarray
    flow: np.ndarray
    weight: np.ndarray | None = None

    def __post_init__(self):
        self.p_prev = np.asarray(self.p_prev, dtype=float).reshape(-1, 2)
        self.m_prev = np.asarray(self.m_prev, dtype=float).reshape(-1, 3)
        self.flow = np.asarray(self.flow, dtype=float).reshape(-1, 2)
        n = len(self.p_prev)
        if len(self.m_prev) != n or len(self.flow) != n:
            raise ValueError("correspondence arrays differ in length")
        if self.weight is None:
            self.weight = np.ones(n)
        else:
            self.weight = np.asarray(self.weight, dtype=float).reshape(n)

    @classmethod
    def from_depth(cls, p_prev, depth, flow, K: Intrinsics) -> "Correspondences":
        p_prev = np.asarray(p_prev, dtype=float)
        return cls(p_prev, backproject(p_prev, depth, K), flow)

    def __len__(self):
        return len(self.p_prev)

    @property
    def observed(self) -> np.ndarray:
        return self.p_prev + self.flow

    def subset(self, idx) -> "Correspondences":
        return Correspondences(self.p_prev[idx], self.m_prev[idx], self.flow[idx], self.weight[idx])


@dataclass(frozen=True)
class HuberKernel:
    """Huber loss on a squared whitened residual norm ``s``.

    ``rho(s) = s`` for ``sqrt(s) <= delta`` and ``2 delta sqrt(s) - delta^2``
    beyond, i.e. quadratic in the residual below ``delta`` and linear above.
    """

    delta: float = 1.345

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("Huber delta must be positive")

    def rho(self, s):
        s = np.asarray(s, dtype=float)
        e = np.sqrt(s)
        return np.where(e <= self.delta, s, 2.0 * self.delta * e - self.delta**2)

    def weight(self, s):
        """First derivative of ``rho`` with respect to ``s`` (the IRLS weight)."""
        s = np.asarray(s, dtype=float)
        e = np.sqrt(s)
        out = np.ones_like(e)
        np.divide(self.delta, e, out=out, where=e > self.delta)
        return out


def _cov(sigma):
    return (np.eye(2) * float(sigma) ** 2).tolist()


@dataclass
class SolverConfig:
    """Estimator settings. Covariances are 2x2, in px^2."""

    sigma1: list = field(default_factory=lambda: _cov(1.0))
    sigma2: list = field(default_factory=lambda: _cov(0.5))
    sigma1_object: list | None = None
    huber_delta: float = 1.345
    max_iterations: int = 100
    cost_tol: float = 1e-15
    step_tol: float = 1e-12
    lambda_init: float = 1e-4
    lambda_up: float = 8.0
    lambda_down: float = 0.25
    ransac_iterations: int = 200
    ransac_confidence: float = 0.99
    inlier_threshold: float = 2.0
    min_points: int = 3
    min_ransac_inliers: int = 6
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma1", "sigma2", "sigma1_object"):
            cov = getattr(self, name)
            if cov is None:
                continue
            c = np.asarray(cov, dtype=float)
            if c.shape != (2, 2) or not np.allclose(c, c.T) or np.any(np.linalg.eigvalsh(c) <= 0):
                raise ValueError(f"{name} must be a symmetric positive definite 2x2 matrix")

    @classmethod
    def isotropic(cls, sigma1=1.0, sigma2=0.5, **kw) -> "SolverConfig":
        return cls(sigma1=_cov(sigma1), sigma2=_cov(sigma2), **kw)

    def covariance(self, kind: Kind) -> np.ndarray:
        if kind == "object" and self.sigma1_object is not None:
            return np.asarray(self.sigma1_object, dtype=float)
        return np.asarray(self.sigma1, dtype=float)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EstimateResult:
    motion: SE3Pose
    inliers: np.ndarray
    cost: float
    initial_cost: float
    iterations: int
    converged: bool
    refined_flow: np.ndarray | None = None
    cost_history: list = field(default_factory=list)

    @property
    def n_inliers(self) -> int:
        return int(self.inliers.sum())


def _whitener(cov) -> np.ndarray:
    """Matrix L with L^T L = cov^-1, so ``|L r|^2`` is the Mahalanobis norm."""
    return np.linalg.cholesky(np.linalg.inv(np.asarray(cov, dtype=float))).T


def retract(pose: SE3Pose, delta, kind: Kind) -> SE3Pose:
    step = se3_exp(delta)
    return pose @ step if kind == "camera" else step @ pose


def transfer(pose: SE3Pose, m_prev, kind: Kind) -> np.ndarray:
    """Frame k-1 points expressed in camera k under a camera or object motion."""
    return pose.inverse().apply(m_prev) if kind == "camera" else pose.apply(m_prev)


def reprojection_residuals(pose: SE3Pose, corrs: Correspondences, K: Intrinsics, kind: Kind,
                           flow_hat=None, jacobian=False):
    """Residual ``p_prev + flow - pi(q)`` per point and, optionally, its twist Jacobian.

    ``flow_hat`` replaces the measured flow (joint problem). Points projecting
    behind the camera yield non-finite residuals.
    """
    flow = corrs.flow if flow_hat is None else flow_hat
    q = transfer(pose, corrs.m_prev, kind)
    x, y, z = q[:, 0], q[:, 1], q[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        zi = np.where(z > 1e-9, 1.0 / z, np.nan)
    pred = np.column_stack([K.f * x * zi + K.cu, K.f * y * zi + K.cv])
    r = corrs.p_prev + flow - pred
    if not jacobian:
        return r
    n = len(q)
    Jp = np.zeros((n, 2, 3))
    Jp[:, 0, 0] = K.f * zi
    Jp[:, 0, 2] = -K.f * x * zi * zi
    Jp[:, 1, 1] = K.f * zi
    Jp[:, 1, 2] = -K.f * y * zi * zi
    Jq = np.zeros((n, 3, 6))
    eye = np.eye(3)
    if kind == "camera":
        Jq[:, :, :3] = -eye
        Jq[:, :, 3:] = _skew_batch(q)
    else:
        Jq[:, :, :3] = eye
        Jq[:, :, 3:] = -_skew_batch(q)
    J = -np.matmul(Jp, Jq)
    return r, J


def _skew_batch(q):
    S = np.zeros((len(q), 3, 3))
    S[:, 0, 1], S[:, 0, 2] = -q[:, 2], q[:, 1]
    S[:, 1, 0], S[:, 1, 2] = q[:, 2], -q[:, 0]
    S[:, 2, 0], S[:, 2, 1] = -q[:, 1], q[:, 0]
    return S


def flow_prior_residuals(corrs: Correspondences, flow_hat):
    """Prior residual ``flow - flow_hat``; its Jacobian w.r.t. ``flow_hat`` is ``-I``."""
    return corrs.flow - flow_hat


class _Problem:
    """Robust cost, linearization and damped solve for one estimation."""

    def __init__(self, corrs, K, kind, cfg: SolverConfig, joint):
        self.corrs, self.K, self.kind, self.joint = corrs, K, kind, joint
        self.kernel = HuberKernel(cfg.huber_delta)
        self.L1 = _whitener(cfg.covariance(kind))
        self.L2 = _whitener(cfg.sigma2)
        self.w = corrs.weight

    def _terms(self, pose, fh, jacobian=False):
        out = reprojection_residuals(pose, self.corrs, self.K, self.kind,
                                     flow_hat=fh if self.joint else None, jacobian=jacobian)
        r1, J = out if jacobian else (out, None)
        e1 = r1 @ self.L1.T
        e2 = flow_prior_residuals(self.corrs, fh) @ self.L2.T if self.joint else None
        return e1, e2, J

    def cost(self, pose, fh) -> float:
        e1, e2, _ = self._terms(pose, fh)
        c = np.sum(self.w * self.kernel.rho(np.sum(e1 * e1, axis=1)))
        if self.joint:
            c += np.sum(self.w * self.kernel.rho(np.sum(e2 * e2, axis=1)))
        return float(c)

    def linearize(self, pose, fh):
        e1, e2, J = self._terms(pose, fh, jacobian=True)
        w1 = self.w * self.kernel.weight(np.sum(e1 * e1, axis=1))
        Jx = np.matmul(self.L1, J)  # whitened d e1 / d twist
        Jf = Jx.reshape(-1, 6)
        wJ = Jf * np.repeat(w1, 2)[:, None]
        Hxx = wJ.T @ Jf
        bx = -(wJ.T @ e1.reshape(-1))
        sys = {"Hxx": Hxx, "bx": bx}
        if self.joint:
            w2 = self.w * self.kernel.weight(np.sum(e2 * e2, axis=1))
            A, B = self.L1, -self.L2  # d e1 / d fh and d e2 / d fh
            Hxf = np.matmul(np.swapaxes(Jx, 1, 2), A) * w1[:, None, None]
            Hff = w1[:, None, None] * (A.T @ A) + w2[:, None, None] * (B.T @ B)
            bf = -(w1[:, None] * (e1 @ A) + w2[:, None] * (e2 @ B))
            sys.update(Hxf=Hxf, Hff=Hff, bf=bf)
        return sys

    def solve(self, sys, lam):
        Hxx = sys["Hxx"] + lam * np.eye(6)
        bx = sys["bx"]
        if not self.joint:
            return np.linalg.solve(Hxx, bx), None
        Hff = sys["Hff"] + lam * np.eye(2)
        a, b, c, d = Hff[:, 0, 0], Hff[:, 0, 1], Hff[:, 1, 0], Hff[:, 1, 1]
        det = a * d - b * c
        Hinv = np.empty_like(Hff)
        Hinv[:, 0, 0], Hinv[:, 0, 1] = d / det, -b / det
        Hinv[:, 1, 0], Hinv[:, 1, 1] = -c / det, a / det
        Hxf = sys["Hxf"]
        n = len(Hxf)
        G = np.matmul(Hxf, Hinv)  # Hxf Hff^-1
        Gr = G.transpose(1, 0, 2).reshape(6, 2 * n)
        S = Hxx - Gr @ Hxf.transpose(1, 0, 2).reshape(6, 2 * n).T
        rhs = bx - Gr @ sys["bf"].reshape(-1)
        dx = np.linalg.solve(S, rhs)
        v = sys["bf"] - np.tensordot(dx, Hxf, axes=([0], [1]))
        df = np.matmul(Hinv, v[:, :, None])[:, :, 0]
        return dx, df


def _run_lm(corrs: Correspondences, init: SE3Pose, cfg: SolverConfig, K: Intrinsics,
            kind: Kind, joint: bool) -> EstimateResult:
    if len(corrs) < cfg.min_points:
        raise UnderdeterminedError(
            f"{len(corrs)} correspondences, at least {cfg.min_points} required", init)
    prob = _Problem(corrs, K, kind, cfg, joint)
    pose = init
    fh = corrs.flow.copy() if joint else None
    cost = prob.cost(pose, fh)
    if not math.isfinite(cost):
        raise EstimationError("non-finite cost at the initial state", init)
    initial_cost = cost
    history = [cost]
    lam = None
    converged = False
    it = 0
    while it < cfg.max_iterations and not converged:
        it += 1
        if cost == 0.0:
            converged = True
            break
        sys = prob.linearize(pose, fh)
        if lam is None:
            lam = cfg.lambda_init * max(float(np.mean(np.diag(sys["Hxx"]))), 1e-12)
        while True:
            try:
                dx, df = prob.solve(sys, lam)
            except np.linalg.LinAlgError:
                dx = None
            if dx is not None and np.all(np.isfinite(dx)):
                new_pose = retract(pose, dx, kind)
                new_fh = fh + df if joint else None
                new_cost = prob.cost(new_pose, new_fh)
                if math.isfinite(new_cost) and new_cost <= cost:
                    step = float(np.abs(dx).max())
                    if joint:
                        step = max(step, float(np.abs(df).max()))
                    decrease = cost - new_cost
                    pose, fh, cost = new_pose, new_fh, new_cost
                    history.append(cost)
                    lam = max(lam * cfg.lambda_down, 1e-15)
                    if step < cfg.step_tol or decrease <= cfg.cost_tol * max(cost, 1e-300):
                        converged = True
                    break
            lam *= cfg.lambda_up
            if lam > 1e20:
                # no descent direction left: we sit at a (numerical) minimum
                converged = True
                break
    if not math.isfinite(cost):
        raise EstimationError("cost diverged", pose)
    r = reprojection_residuals(pose, corrs, K, kind)
    err = np.hypot(r[:, 0], r[:, 1])
    inliers = np.isfinite(err) & (err < cfg.inlier_threshold)
    return EstimateResult(pose, inliers, cost, initial_cost, it, converged,
                          refined_flow=fh if joint else None, cost_history=history)


def estimate_camera_motion(corrs, init: SE3Pose, cfg: SolverConfig, K: Intrinsics) -> EstimateResult:
    """Motion-only camera estimate from static correspondences."""
    return _run_lm(corrs, init, cfg, K, "camera", joint=False)


def estimate_object_motion(corrs, init: SE3Pose, cfg: SolverConfig, K: Intrinsics) -> EstimateResult:
    """Motion-only estimate of ``X``; combine with the camera motion via ``T X``."""
    return _run_lm(corrs, init, cfg, K, "object", joint=False)


def estimate_joint(corrs, init_motion: SE3Pose, cfg: SolverConfig, K: Intrinsics,
                   mode: Kind = "camera") -> EstimateResult:
    """Joint motion and per-point flow refinement; ``refined_flow`` is returned."""
    if mode not in ("camera", "object"):
        raise ValueError(f"unknown mode {mode!r}")
    return _run_lm(corrs, init_motion, cfg, K, mode, joint=True)


def estimate(corrs, init, cfg, K, kind: Kind, joint: bool) -> EstimateResult:
    return _run_lm(corrs, init, cfg, K, kind, joint)


def init_by_propagation(prev_motion: SE3Pose | None) -> SE3Pose:
    """Constant-motion model: reuse the previous motion, identity at sequence start."""
    return SE3Pose.identity() if prev_motion is None else prev_motion


def count_inliers(motion: SE3Pose, corrs: Correspondences, K: Intrinsics, threshold: float,
                  kind: Kind = "camera") -> np.ndarray:
    Q = motion.inverse() if kind == "camera" else motion
    return reprojection_errors(Q, corrs.m_prev, corrs.observed, K) < threshold


def init_by_p3p_ransac(corrs: Correspondences, cfg: SolverConfig, K: Intrinsics,
                       rng: np.random.Generator | None = None, kind: Kind = "camera"):
    """P3P + RANSAC hypothesis, polished by least squares on its inliers.

    Returns ``(motion, inlier_mask)``; raises :class:`InitFailedError` when no
    hypothesis gathers ``cfg.min_ransac_inliers`` inliers.
    """
    if len(corrs) < 4:
        raise InitFailedError(f"P3P RANSAC needs at least 4 correspondences, got {len(corrs)}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    found = ransac_absolute_pose(
        corrs.m_prev, corrs.observed, K, rng,
        max_iterations=cfg.ransac_iterations, threshold=cfg.inlier_threshold,
        confidence=cfg.ransac_confidence, min_inliers=cfg.min_ransac_inliers,
    )
    if found is None:
        raise InitFailedError("no P3P hypothesis reached the minimum inlier count")
    Q, mask = found
    motion = Q.inverse() if kind == "camera" else Q
    # plain least squares on the consensus set removes the minimal solver's
    # conditioning error without letting outliers back in
    polish_cfg = SolverConfig(sigma1=cfg.sigma1, huber_delta=1e12, max_iterations=10,
                              inlier_threshold=cfg.inlier_threshold)
    try:
        polished = _run_lm(corrs.subset(mask), motion, polish_cfg, K, kind, joint=False)
        motion = polished.motion
    except EstimationError:
        pass
    return motion, count_inliers(motion, corrs, K, cfg.inlier_threshold, kind)


def select_model(candidates: Sequence[tuple]) -> SE3Pose:
    """Pick the candidate with the most inliers.

    ``candidates`` are ``(pose, inlier_count)`` pairs; ties go to the earliest
    entry, so callers list the propagated model first.
    """
    return candidates[select_model_index(candidates)][0]


def select_model_index(candidates: Sequence[tuple]) -> int:
    if not candidates:
        raise ValueError("no candidate models")
    best = 0
    for i, cand in enumerate(candidates):
        if cand[1] > candidates[best][1]:
            best = i
    return best
