"""Perspective-three-point minimal solver and RANSAC absolute pose.

Grunert's classic formulation: the three camera-to-point distances are
reduced to a quartic in ``v = s3 / s1``; every admissible root yields a set
of camera-frame points which is aligned to the reference points with a
closed-form rigid fit.

All poses returned here map reference coordinates into the camera frame
(``q = Q m``).
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import SE3Pose, Intrinsics

_MIN_SAMPLE_AREA = 1e-10


def rigid_fit(src, dst) -> SE3Pose:
    """Least-squares rotation and translation with ``dst ~ R src + t``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    Hm = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(Hm)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return SE3Pose(R, cd - R @ cs)


def _polish(coeffs, x, iters=3):
    dcoeffs = np.polyder(coeffs)
    for _ in range(iters):
        d = np.polyval(dcoeffs, x)
        if d == 0:
            break
        x = x - np.polyval(coeffs, x) / d
    return x


def p3p_grunert(points, bearings) -> list[SE3Pose]:
    """Solve P3P for three reference points and their unit bearing vectors.

    Returns up to four poses; an empty list for degenerate input.
    """
    P = np.asarray(points, dtype=float)
    j = np.asarray(bearings, dtype=float)
    j = j / np.linalg.norm(j, axis=1, keepdims=True)

    a2 = float(np.sum((P[1] - P[2]) ** 2))
    b2 = float(np.sum((P[0] - P[2]) ** 2))
    c2 = float(np.sum((P[0] - P[1]) ** 2))
    if min(a2, b2, c2) <= 0:
        return []
    ca = float(j[1] @ j[2])
    cb = float(j[0] @ j[2])
    cg = float(j[0] @ j[1])

    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    A4 = (amc - 1) ** 2 - 4 * c2 / b2 * ca * ca
    A3 = 4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca * ca * cb)
    A2 = 2 * (
        amc * amc - 1 + 2 * amc * amc * cb * cb + 2 * (b2 - c2) / b2 * ca * ca
        - 4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg * cg
    )
    A1 = 4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg * cg * cb - (1 - apc) * ca * cg)
    A0 = (1 + amc) ** 2 - 4 * a2 / b2 * cg * cg
    coeffs = np.array([A4, A3, A2, A1, A0])
    scale = np.abs(coeffs).max()
    if not np.isfinite(scale) or scale == 0:
        return []
    coeffs = coeffs / scale
    # leading coefficient can vanish for special geometry; np.roots trims it
    roots = np.roots(coeffs)

    poses = []
    for r in roots:
        if abs(r.imag) > 1e-6 * max(1.0, abs(r.real)):
            continue
        v = _polish(coeffs, float(r.real))
        if v <= 0:
            continue
        den = 2 * (cg - v * ca)
        if abs(den) < 1e-14:
            continue
        u = ((amc - 1) * v * v - 2 * amc * cb * v + 1 + amc) / den
        if u <= 0:
            continue
        q = 1 + v * v - 2 * v * cb
        if q <= 0:
            continue
        s1 = math.sqrt(b2 / q)
        Q = np.stack([s1 * j[0], u * s1 * j[1], v * s1 * j[2]])
        poses.append(rigid_fit(P, Q))
    return poses


def _sample_ok(P, bearings):
    area = np.linalg.norm(np.cross(P[1] - P[0], P[2] - P[0]))
    size = max(np.sum((P[1] - P[0]) ** 2), np.sum((P[2] - P[0]) ** 2), 1e-300)
    if area <= _MIN_SAMPLE_AREA * size:
        return False
    return abs(np.linalg.det(bearings)) > 1e-12


def reprojection_errors(Q: SE3Pose, points, observed, K: Intrinsics) -> np.ndarray:
    """Pixel distance between ``observed`` and the projection of ``Q points``.

    Points landing behind the camera get an infinite error.
    """
    q = Q.apply(points)
    z = q[:, 2]
    err = np.full(len(q), np.inf)
    ok = z > 1e-9
    pu = K.f * q[ok, 0] / z[ok] + K.cu
    pv = K.f * q[ok, 1] / z[ok] + K.cv
    err[ok] = np.hypot(observed[ok, 0] - pu, observed[ok, 1] - pv)
    return err


def ransac_absolute_pose(
    points,
    observed,
    K: Intrinsics,
    rng: np.random.Generator,
    *,
    max_iterations: int = 200,
    threshold: float = 2.0,
    confidence: float = 0.99,
    min_inliers: int = 4,
):
    """Hypothesize-and-verify over P3P samples, scored by inlier count.

    Returns ``(Q, inlier_mask)`` or ``None`` when no hypothesis reaches
    ``min_inliers``.
    """
    points = np.asarray(points, dtype=float)
    observed = np.asarray(observed, dtype=float)
    n = len(points)
    if n < 4:
        return None
    rays = np.column_stack([(observed[:, 0] - K.cu) / K.f, (observed[:, 1] - K.cv) / K.f, np.ones(n)])
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)

    best_Q, best_mask, best_count = None, None, 0
    needed = max_iterations
    it = 0
    while it < min(needed, max_iterations):
        it += 1
        idx = rng.choice(n, size=3, replace=False)
        if not _sample_ok(points[idx], rays[idx]):
            continue
        for Q in p3p_grunert(points[idx], rays[idx]):
            mask = reprojection_errors(Q, points, observed, K) < threshold
            count = int(mask.sum())
            if count > best_count:
                best_Q, best_mask, best_count = Q, mask, count
                w = count / n
                if w >= 1.0:
                    needed = 0
                else:
                    denom = math.log(max(1e-300, 1.0 - w**3))
                    needed = int(math.ceil(math.log(1.0 - confidence) / denom)) if denom < 0 else max_iterations
    if best_Q is None or best_count < min_inliers:
        return None
    return best_Q, best_mask
