"""Evaluation metrics: pose change error, object velocity and end-point error."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import SE3Pose, rotation_angle


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class PoseError:
    """Translation error (m) and rotation error (deg) of a pose change."""

    t: float
    r: float


def pose_change_error(est: SE3Pose, gt: SE3Pose) -> PoseError:
    E = est.inverse() @ gt
    return PoseError(float(np.linalg.norm(E.translation)), math.degrees(rotation_angle(E.rotation)))


def centroid_displacement(H: SE3Pose, c) -> float:
    """``|t - (I - R) c|``: how far the point ``c`` moves under ``H``.

    The value is unchanged by a change of reference frame as long as ``H``
    and ``c`` are expressed in the same frame, so the camera k-1 frame serves
    as well as the world frame.
    """
    c = np.asarray(c, dtype=float).reshape(3)
    return float(np.linalg.norm(H.translation - (np.eye(3) - H.rotation) @ c))


def object_velocity(H: SE3Pose, c, frame_period: float) -> float:
    """Object speed in km/h from one frame-to-frame motion and its centroid."""
    if not frame_period > 0:
        raise MetricError(f"frame period must be positive, got {frame_period}")
    return centroid_displacement(H, c) * 3.6 / frame_period


def velocity_error(est: float, gt: float) -> float:
    return abs(est - gt)


@dataclass(frozen=True)
class EPEStats:
    mean: float
    mean_x: float
    mean_y: float
    median: float
    p90: float
    count: int


def epe(flow_est, flow_gt, region=None) -> EPEStats:
    """End-point error statistics over ``region`` (boolean mask, default: all finite)."""
    a = np.asarray(flow_est, dtype=float)
    b = np.asarray(flow_gt, dtype=float)
    if a.shape != b.shape:
        raise MetricError(f"flow shapes differ: {a.shape} vs {b.shape}")
    diff = (a - b).reshape(-1, 2)
    sel = np.all(np.isfinite(diff), axis=1)
    if region is not None:
        sel &= np.asarray(region, dtype=bool).reshape(-1)
    if not sel.any():
        raise MetricError("EPE over an empty region")
    d = diff[sel]
    e = np.hypot(d[:, 0], d[:, 1])
    return EPEStats(float(e.mean()), float(np.abs(d[:, 0]).mean()), float(np.abs(d[:, 1]).mean()),
                    float(np.median(e)), float(np.percentile(e, 90)), int(sel.sum()))


@dataclass
class Mean:
    """Mergeable running mean; merging chunks equals aggregating the whole."""

    total: float = 0.0
    count: int = 0

    def add(self, value, n=1):
        self.total += float(value) * n
        self.count += n
        return self

    def merge(self, other: "Mean") -> "Mean":
        return Mean(self.total + other.total, self.count + other.count)

    @property
    def value(self) -> float | None:
        return self.total / self.count if self.count else None
