"""Pinhole camera model, SE(3) algebra and point-motion prediction.

Conventions used throughout the package:

* camera frame: x right, y down, z forward (meters);
* pixel coordinates (u, v) with the principal point at (cu, cv);
* a twist is the 6-vector ``(rho, omega)``: translational part first;
* ``T`` is the camera motion between frames k-1 and k expressed in frame
  k-1, i.e. the pose of camera k in camera k-1 coordinates, so a static
  point moves to ``T^-1 m`` in the new camera frame;
* ``X`` maps a frame k-1 object point straight into camera k coordinates,
  and the object motion in the k-1 frame is ``H = T X``.

All functions accept batched inputs: points are ``(..., 3)`` arrays and
pixels ``(..., 2)`` arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_SMALL_ANGLE = 1e-6
_ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    pass


class InvalidDepthError(GeometryError):
    pass


class BehindCameraError(GeometryError):
    pass


class AmbiguousLogError(GeometryError):
    pass


class CalibrationError(GeometryError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    """Single-focal pinhole intrinsics (pixels)."""

    f: float
    cu: float
    cv: float
    width: int
    height: int

    def __post_init__(self):
        if not (math.isfinite(self.f) and self.f > 0):
            raise CalibrationError(f"focal length must be positive, got {self.f}")
        if not 0 <= self.cu < self.width:
            raise CalibrationError(f"cu={self.cu} outside [0, {self.width})")
        if not 0 <= self.cv < self.height:
            raise CalibrationError(f"cv={self.cv} outside [0, {self.height})")

    @classmethod
    def from_fx_fy(cls, fx, fy, cu, cv, width, height, rtol=1e-3):
        """Build from a two-focal calibration, rejecting fx != fy beyond ``rtol``."""
        if abs(fx - fy) > rtol * max(abs(fx), abs(fy)):
            raise CalibrationError(
                f"fx={fx} and fy={fy} differ by more than {rtol:.1%}; "
                "only a single shared focal length is supported"
            )
        return cls(0.5 * (fx + fy), cu, cv, int(width), int(height))

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    def matrix(self) -> np.ndarray:
        return np.array([[self.f, 0.0, self.cu], [0.0, self.f, self.cv], [0.0, 0.0, 1.0]])


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SE3Pose:
    """Rigid transformation ``x -> R x + t``.

    Composition with ``@`` does not re-orthonormalize; float drift after
    10^4 random compositions stays around 1e-14, far inside the 1e-9
    manifold tolerance. Use :meth:`normalized` when importing poses from
    low-precision sources.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _readonly(self.rotation)
        t = _readonly(self.translation).reshape(3)
        if R.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {R.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise GeometryError("pose contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(R) - 1) > _ORTHO_TOL:
            raise GeometryError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M, normalize=False) -> "SE3Pose":
        M = np.asarray(M, dtype=float)
        R = M[:3, :3]
        if normalize:
            R = project_to_so3(R)
        return cls(R, M[:3, 3])

    @classmethod
    def from_translation(cls, t) -> "SE3Pose":
        return cls(np.eye(3), t)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def matrix3x4(self) -> np.ndarray:
        return self.matrix()[:3]

    def inverse(self) -> "SE3Pose":
        Rt = self.rotation.T
        return SE3Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "SE3Pose") -> "SE3Pose":
        if not isinstance(other, SE3Pose):
            return NotImplemented
        return SE3Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def rotation_angle(self) -> float:
        return rotation_angle(self.rotation)

    def normalized(self) -> "SE3Pose":
        return SE3Pose(project_to_so3(self.rotation), self.translation)

    def allclose(self, other: "SE3Pose", atol=1e-9) -> bool:
        return np.allclose(self.matrix(), other.matrix(), rtol=0, atol=atol)

    def __repr__(self):
        return f"SE3Pose(R={self.rotation.tolist()}, t={self.translation.tolist()})"


def project_to_so3(R) -> np.ndarray:
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def hat(w) -> np.ndarray:
    """Skew-symmetric matrix(es) of ``(..., 3)`` vectors."""
    w = np.asarray(w, dtype=float)
    W = np.zeros(w.shape[:-1] + (3, 3))
    W[..., 0, 1] = -w[..., 2]
    W[..., 0, 2] = w[..., 1]
    W[..., 1, 0] = w[..., 2]
    W[..., 1, 2] = -w[..., 0]
    W[..., 2, 0] = -w[..., 1]
    W[..., 2, 1] = w[..., 0]
    return W


def vee(W) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    return np.stack([W[..., 2, 1], W[..., 0, 2], W[..., 1, 0]], axis=-1)


def se3_hat(xi) -> np.ndarray:
    """4x4 Lie-algebra matrix of a twist ``(rho, omega)``."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    M = np.zeros((4, 4))
    M[:3, :3] = hat(xi[3:])
    M[:3, 3] = xi[:3]
    return M


def _so3_coeffs(theta):
    # A = sin(t)/t, B = (1-cos t)/t^2, C = (t - sin t)/t^3
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = math.sin(theta), math.cos(theta)
    return s / theta, (1.0 - c) / theta**2, (theta - s) / theta**3


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(3)
    theta = float(np.linalg.norm(w))
    A, B, _ = _so3_coeffs(theta)
    W = hat(w)
    return np.eye(3) + A * W + B * (W @ W)


def rotation_angle(R) -> float:
    """Rotation angle in radians.

    atan2 of the skew and symmetric parts keeps full precision near zero,
    where the bare trace formula loses about half the digits.
    """
    R = np.asarray(R, dtype=float)
    s = float(np.linalg.norm(vee(R - R.T))) * 0.5
    c = 0.5 * (np.trace(R) - 1.0)
    return math.atan2(s, c)


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    skew = vee(R - R.T) * 0.5  # sin(theta) * axis
    s = float(np.linalg.norm(skew))
    c = 0.5 * (np.trace(R) - 1.0)
    theta = math.atan2(s, c)
    if math.pi - theta < 1e-9:
        raise AmbiguousLogError("rotation angle is pi; the logarithm is not unique")
    if theta < _SMALL_ANGLE:
        # theta / sin(theta) ~ 1 + theta^2/6
        return skew * (1.0 + theta * theta / 6.0)
    if theta < 0.5 * math.pi:
        return skew * (theta / s)
    # near pi the skew part loses precision; recover the axis from the
    # symmetric part and take only the sign from the skew part
    S = 0.5 * (R + R.T) - c * np.eye(3)
    k = int(np.argmax(np.diag(S)))
    axis = S[:, k] / math.sqrt(S[k, k] * (1.0 - c))
    axis /= np.linalg.norm(axis)
    if np.dot(axis, skew) < 0:
        axis = -axis
    return axis * theta


def se3_exp(xi) -> SE3Pose:
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, w = xi[:3], xi[3:]
    theta = float(np.linalg.norm(w))
    A, B, C = _so3_coeffs(theta)
    W = hat(w)
    W2 = W @ W
    R = np.eye(3) + A * W + B * W2
    V = np.eye(3) + B * W + C * W2
    return SE3Pose(R, V @ rho)


def se3_log(T: SE3Pose) -> np.ndarray:
    w = so3_log(T.rotation)
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < _SMALL_ANGLE:
        D = 1.0 / 12.0 + theta * theta / 720.0
    else:
        D = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / theta**2
    V_inv = np.eye(3) - 0.5 * W + D * (W @ W)
    return np.concatenate([V_inv @ T.translation, w])


def backproject(p, d, K: Intrinsics) -> np.ndarray:
    """Lift pixel(s) ``p`` with depth(s) ``d`` to camera-frame points."""
    p = np.asarray(p, dtype=float)
    d = np.asarray(d, dtype=float)
    if not np.all(np.isfinite(d)) or np.any(d <= 0):
        raise InvalidDepthError("depth must be positive and finite")
    x = (p[..., 0] - K.cu) * d / K.f
    y = (p[..., 1] - K.cv) * d / K.f
    return np.stack([x, y, np.broadcast_to(d, x.shape)], axis=-1)


def project(m, K: Intrinsics) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    z = m[..., 2]
    if np.any(~(z > 0)):
        raise BehindCameraError("cannot project a point with z <= 0")
    return np.stack([K.f * m[..., 0] / z + K.cu, K.f * m[..., 1] / z + K.cv], axis=-1)


def predict_static_point(m_prev, T: SE3Pose, K: Intrinsics) -> np.ndarray:
    """Pixel in frame k of a static point observed at ``m_prev`` in frame k-1."""
    return project(T.inverse().apply(m_prev), K)


def predict_object_point(m_prev, X: SE3Pose, K: Intrinsics) -> np.ndarray:
    """Pixel in frame k of an object point moved by ``X``."""
    return project(X.apply(m_prev), K)


def recover_object_motion(T: SE3Pose, X: SE3Pose) -> SE3Pose:
    return T @ X


def object_motion_global(L_prev: SE3Pose, H_body: SE3Pose) -> SE3Pose:
    """Conjugate a body-fixed motion into the reference frame of ``L_prev``."""
    return L_prev @ H_body @ L_prev.inverse()
