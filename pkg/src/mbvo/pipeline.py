"""Per-frame orchestration: sampling, camera estimation, object classification,
label propagation and object motion estimation.

A step consumes the frame pair (k-1, k). Depth and mask come from frame
k-1, the flow (k-1 -> k) from frame k, and frame k's depth and mask are
only read to measure scene flow. Object instances are those of frame k-1's
mask; their track labels are settled once their dynamic/static verdict for
the step is known, using the votes carried over from frame k-2.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .dynamics import (
    DEFAULT_SF_PROPORTION,
    DEFAULT_SF_THRESHOLD,
    ObjectTrack,
    Status,
    TrackLabelSet,
    compute_scene_flow,
    dynamic_fraction,
    propagate_labels,
    update_track,
)
from .estimator import (
    Correspondences,
    EstimateResult,
    EstimationError,
    InitFailedError,
    SolverConfig,
    count_inliers,
    estimate,
    init_by_p3p_ransac,
    init_by_propagation,
    select_model_index,
)
from .geometry import Intrinsics, SE3Pose, backproject
from .metrics import epe, object_velocity

log = logging.getLogger(__name__)


class FrameError(RuntimeError):
    pass


class DegenerateFrameError(FrameError):
    pass


class TooFewPointsError(RuntimeError):
    pass


@dataclass
class Frame:
    """One time step. ``flow`` maps frame k-1 pixels into this frame."""

    index: int
    depth: np.ndarray
    mask: np.ndarray
    intrinsics: Intrinsics
    flow: np.ndarray | None = None
    frame_period: float = 0.1
    flow_gt: np.ndarray | None = None

    def __post_init__(self):
        K = self.intrinsics
        shape = (K.height, K.width)
        depth = np.array(self.depth, dtype=float)
        depth[~np.isfinite(depth) | (depth < 0)] = 0.0
        self.depth = depth
        self.mask = np.asarray(self.mask, dtype=np.uint16)
        if depth.shape != shape or self.mask.shape != shape:
            raise ValueError(f"frame {self.index}: rasters must be {shape}")
        for name in ("flow", "flow_gt"):
            f = getattr(self, name)
            if f is not None:
                f = np.asarray(f, dtype=float)
                if f.shape != shape + (2,):
                    raise ValueError(f"frame {self.index}: {name} must be {shape + (2,)}")
                setattr(self, name, f)
        if not self.frame_period > 0:
            raise ValueError("frame period must be positive")

    @property
    def shape(self):
        return self.depth.shape

    def instance_ids(self) -> list[int]:
        return [int(i) for i in np.unique(self.mask) if i > 0]


@dataclass
class PipelineConfig:
    solver: SolverConfig = field(default_factory=SolverConfig)
    mode: str = "joint"
    grid_step: int = 8
    object_stride: int = 3
    max_background_depth: float = 40.0
    min_static_points: int = 20
    min_object_points: int = 30
    min_classify_points: int = 10
    max_depth_gate: float = 25.0
    min_area_gate: float = 0.005
    sf_threshold: float = DEFAULT_SF_THRESHOLD
    sf_proportion: float = DEFAULT_SF_PROPORTION
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("joint", "motion-only"):
            raise ValueError(f"mode must be 'joint' or 'motion-only', got {self.mode!r}")

    @property
    def joint(self) -> bool:
        return self.mode == "joint"

    def to_dict(self) -> dict:
        return asdict(self)


def _flow_targets(p, flow, K: Intrinsics):
    tgt = p + flow
    ok = np.all(np.isfinite(tgt), axis=1)
    ok &= (tgt[:, 0] >= 0) & (tgt[:, 0] <= K.width - 1) & (tgt[:, 1] >= 0) & (tgt[:, 1] <= K.height - 1)
    return ok


def _gather(prev: Frame, curr: Frame, vv, uu) -> tuple[Correspondences, np.ndarray]:
    K = prev.intrinsics
    flow = curr.flow[vv, uu]
    p = np.column_stack([uu, vv]).astype(float)
    ok = _flow_targets(p, flow, K)
    p, flow, vv, uu = p[ok], flow[ok], vv[ok], uu[ok]
    m = backproject(p, prev.depth[vv, uu], K) if len(p) else np.zeros((0, 3))
    return Correspondences(p, m, flow), np.column_stack([vv, uu])


def sample_static_points(prev: Frame, curr: Frame, grid_step: int = 8, max_depth: float = 40.0,
                         min_points: int = 20):
    """Background correspondences on a regular grid (offset ``grid_step // 2``).

    Returns ``(correspondences, pixel_rc)``; raises :class:`DegenerateFrameError`
    below ``min_points``.
    """
    if curr.flow is None:
        raise DegenerateFrameError(f"frame {curr.index} carries no flow")
    h, w = prev.shape
    vs = np.arange(grid_step // 2, h, grid_step)
    us = np.arange(grid_step // 2, w, grid_step)
    vv, uu = (a.ravel() for a in np.meshgrid(vs, us, indexing="ij"))
    d = prev.depth[vv, uu]
    sel = (prev.mask[vv, uu] == 0) & (d > 0) & (d < max_depth)
    corrs, rc = _gather(prev, curr, vv[sel], uu[sel])
    if len(corrs) < min_points:
        raise DegenerateFrameError(
            f"frame {curr.index}: {len(corrs)} static points, at least {min_points} required")
    return corrs, rc


def sample_object_points(prev: Frame, curr: Frame, instance_id: int, stride: int = 3,
                         min_points: int = 0):
    """Every ``stride``-th pixel in both axes inside the instance mask.

    Sites lie on the global lattice ``u % stride == 0, v % stride == 0`` and
    need valid depth and an in-image flow target.
    """
    if curr.flow is None:
        raise TooFewPointsError(f"frame {curr.index} carries no flow")
    sub_mask = prev.mask[::stride, ::stride] == instance_id
    vv, uu = np.nonzero(sub_mask & (prev.depth[::stride, ::stride] > 0))
    corrs, rc = _gather(prev, curr, vv * stride, uu * stride)
    if len(corrs) < min_points:
        raise TooFewPointsError(
            f"instance {instance_id}: {len(corrs)} points, at least {min_points} required")
    return corrs, rc


def gate_object(mean_depth: float, area_fraction: float, max_depth: float = 25.0,
                min_area: float = 0.005) -> bool:
    """Accept objects that are close enough and cover enough of the image."""
    return mean_depth <= max_depth and area_fraction >= min_area


def sample_depth(curr: Frame, pts, same_instance=True):
    """Depth at sub-pixel locations by bilinear interpolation of inverse depth.

    Inverse depth is affine over a planar surface, so the interpolation is exact
    inside a face. A location is invalid unless its four neighbours have valid
    depth and (with ``same_instance``) share one non-zero instance id.
    """
    h, w = curr.shape
    u, v = pts[:, 0], pts[:, 1]
    u0 = np.clip(np.floor(u).astype(np.intp), 0, w - 2)
    v0 = np.clip(np.floor(v).astype(np.intp), 0, h - 2)
    a, b = u - u0, v - v0
    D = curr.depth
    d00, d01, d10, d11 = D[v0, u0], D[v0, u0 + 1], D[v0 + 1, u0], D[v0 + 1, u0 + 1]
    ok = (d00 > 0) & (d01 > 0) & (d10 > 0) & (d11 > 0)
    if same_instance:
        M = curr.mask
        m00 = M[v0, u0]
        ok &= (m00 > 0) & (M[v0, u0 + 1] == m00) & (M[v0 + 1, u0] == m00) & (M[v0 + 1, u0 + 1] == m00)
    with np.errstate(divide="ignore"):
        inv = ((1 - a) * (1 - b) / d00 + a * (1 - b) / d01 + (1 - a) * b / d10 + a * b / d11)
    depth = np.where(ok, 1.0 / np.where(ok, inv, 1.0), np.nan)
    return depth, ok


def object_scene_flow(corrs: Correspondences, curr: Frame, T: SE3Pose) -> np.ndarray:
    """Scene flow of the correspondences whose frame k depth can be measured."""
    if len(corrs) == 0:
        return np.zeros((0, 3))
    tgt = corrs.observed
    depth, ok = sample_depth(curr, tgt)
    if not ok.any():
        return np.zeros((0, 3))
    m_curr = backproject(tgt[ok], depth[ok], curr.intrinsics)
    return compute_scene_flow(corrs.m_prev[ok], m_curr, T)


@dataclass
class CameraResult:
    motion: SE3Pose
    init_source: str
    candidates: dict
    n_points: int
    n_inliers: int
    cost: float
    iterations: int
    converged: bool
    epe: dict | None = None


@dataclass
class ObjectResult:
    instance_id: int
    label: int
    status: str
    dynamic_fraction: float | None
    n_classified: int
    area: float
    mean_depth: float
    n_points: int
    gated: bool
    estimated: bool = False
    reason: str = ""
    motion: SE3Pose | None = None
    relative_motion: SE3Pose | None = None
    centroid: tuple | None = None
    velocity: float | None = None
    n_inliers: int = 0
    cost: float | None = None
    iterations: int = 0
    new_label: bool = False
    epe: dict | None = None


@dataclass
class FrameResult:
    index: int
    camera: CameraResult
    camera_pose: SE3Pose
    objects: list
    labels: dict
    timing: dict = field(default_factory=dict)

    def object_by_label(self, label: int) -> ObjectResult | None:
        for o in self.objects:
            if o.label == label:
                return o
        return None


@dataclass
class PipelineState:
    last_camera_motion: SE3Pose | None = None
    camera_pose: SE3Pose = field(default_factory=SE3Pose.identity)
    labels: TrackLabelSet = field(default_factory=TrackLabelSet)
    labelled_mask: np.ndarray | None = None
    tracks: dict = field(default_factory=dict)


def _epe_pair(measured, refined, gt, inliers):
    if gt is None:
        return None
    ok = np.all(np.isfinite(gt), axis=1)
    if not ok.any():
        return None
    out = {"measured": epe(measured[ok], gt[ok]).mean}
    if refined is not None:
        out["refined"] = epe(refined[ok], gt[ok]).mean
        sel = ok & inliers
        if sel.any():
            out["measured_inliers"] = epe(measured[sel], gt[sel]).mean
            out["refined_inliers"] = epe(refined[sel], gt[sel]).mean
    return out


def _gt_flow_at(curr: Frame, rc):
    if curr.flow_gt is None:
        return None
    return curr.flow_gt[rc[:, 0], rc[:, 1]]


def estimate_camera(prev: Frame, curr: Frame, state: PipelineState, cfg: PipelineConfig):
    """Static sampling, two-model initialization and the camera solve."""
    K = prev.intrinsics
    static, rc = sample_static_points(prev, curr, cfg.grid_step, cfg.max_background_depth,
                                      cfg.min_static_points)
    thr = cfg.solver.inlier_threshold
    prop = init_by_propagation(state.last_camera_motion)
    candidates = [(prop, int(count_inliers(prop, static, K, thr).sum()), "propagation")]
    rng = np.random.default_rng([cfg.seed, curr.index, 0])
    try:
        pose, mask = init_by_p3p_ransac(static, cfg.solver, K, rng)
        candidates.append((pose, int(mask.sum()), "p3p"))
    except InitFailedError as exc:
        log.debug("frame %d: P3P init failed: %s", curr.index, exc)
    best = select_model_index(candidates)
    try:
        res = estimate(static, candidates[best][0], cfg.solver, K, "camera", cfg.joint)
    except EstimationError as exc:
        raise FrameError(f"frame {curr.index}: camera estimation failed: {exc}") from exc
    cam = CameraResult(res.motion, candidates[best][2], {c[2]: c[1] for c in candidates},
                       len(static), res.n_inliers, res.cost, res.iterations, res.converged,
                       _epe_pair(static.flow, res.refined_flow, _gt_flow_at(curr, rc), res.inliers))
    return cam


def process_frame(prev: Frame, curr: Frame, state: PipelineState, cfg: PipelineConfig) -> FrameResult:
    """Run one step of the pipeline and advance ``state``."""
    if curr.index != prev.index + 1:
        raise FrameError(f"frames {prev.index} and {curr.index} are not consecutive")
    K = prev.intrinsics
    timing = {}
    t0 = time.perf_counter()
    cam = estimate_camera(prev, curr, state, cfg)
    T = cam.motion
    timing["camera"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    npix = K.n_pixels
    observations = {}
    for iid in prev.instance_ids():
        region = prev.mask == iid
        dvals = prev.depth[region]
        dvals = dvals[dvals > 0]
        mean_depth = float(dvals.mean()) if len(dvals) else math.inf
        area = float(region.sum()) / npix
        corrs, rc = sample_object_points(prev, curr, iid, cfg.object_stride)
        flows = object_scene_flow(corrs, curr, T)
        if len(flows) >= cfg.min_classify_points:
            frac = dynamic_fraction(flows, cfg.sf_threshold)
            status = Status.DYNAMIC if frac > cfg.sf_proportion else Status.STATIC
        else:
            # not enough evidence: decided after labelling from the track's history
            frac, status = None, None
        observations[iid] = (corrs, rc, frac, len(flows), status, area, mean_depth)

    prev_flow = prev.flow if state.labelled_mask is not None else None
    labels = propagate_labels(state.labelled_mask, state.labels, prev.mask, prev_flow,
                              dynamic={i: o[4] is not Status.STATIC for i, o in observations.items()})
    timing["classify"] = time.perf_counter() - t1

    t2 = time.perf_counter()
    objects = []
    seen = set()
    for iid, (corrs, rc, frac, ncls, status, area, mean_depth) in observations.items():
        label = labels.label_of(iid)
        if status is None:
            known = state.tracks.get(label)
            status = known.status if known is not None and known.status is not Status.LOST else Status.STATIC
        gated = gate_object(mean_depth, area, cfg.max_depth_gate, cfg.min_area_gate)
        obj = ObjectResult(iid, label, status.value, frac, ncls, area, mean_depth, len(corrs), gated,
                           new_label=label >= state.labels.next_label)
        objects.append(obj)
        if label:
            seen.add(label)
        if label == 0:
            obj.reason = "static, untracked"
            continue
        track = state.tracks.get(label) or ObjectTrack(label)
        if status is not Status.DYNAMIC:
            obj.reason = "static" if frac is not None else "too few points to classify"
            state.tracks[label] = ObjectTrack(label, track.records, Status.STATIC)
            continue
        if not gated:
            obj.reason = "gated out"
            state.tracks[label] = track
            continue
        if len(corrs) < cfg.min_object_points:
            obj.reason = f"too few points ({len(corrs)} < {cfg.min_object_points})"
            state.tracks[label] = track
            continue
        # object init: its own previous motion when tracked, else identity
        X0 = T.inverse() @ track.records[-1].motion if track.records else SE3Pose.identity()
        try:
            res = estimate(corrs, X0, cfg.solver, K, "object", cfg.joint)
        except EstimationError as exc:
            obj.reason = f"estimation failed: {exc}"
            state.tracks[label] = track
            continue
        H = T @ res.motion
        c = corrs.m_prev.mean(axis=0)
        obj.estimated = True
        obj.motion = H
        obj.relative_motion = res.motion
        obj.centroid = tuple(c.tolist())
        obj.velocity = object_velocity(H, c, curr.frame_period)
        obj.n_inliers = res.n_inliers
        obj.cost = res.cost
        obj.iterations = res.iterations
        obj.epe = _epe_pair(corrs.flow, res.refined_flow, _gt_flow_at(curr, rc), res.inliers)
        state.tracks[label] = update_track(track, H, c, area, frame=curr.index,
                                           frame_period=curr.frame_period, n_points=len(corrs),
                                           mean_depth=mean_depth, status=Status.DYNAMIC)
    for label, track in state.tracks.items():
        if label not in seen and track.status is not Status.LOST:
            state.tracks[label] = ObjectTrack(label, track.records, Status.LOST)
    timing["objects"] = time.perf_counter() - t2

    state.last_camera_motion = T
    state.camera_pose = state.camera_pose @ T
    state.labels = labels
    state.labelled_mask = prev.mask
    objects.sort(key=lambda o: o.instance_id)
    return FrameResult(curr.index, cam, state.camera_pose, objects, dict(labels.active), timing)


class MultiBodyOdometry:
    """Streaming front-end over a frame sequence."""

    def __init__(self, cfg: PipelineConfig | None = None):
        self.cfg = cfg or PipelineConfig()
        self.state = PipelineState()
        self.prev: Frame | None = None
        self.failures: list = []

    def step(self, frame: Frame) -> FrameResult | None:
        prev, self.prev = self.prev, frame
        if prev is None:
            return None
        t = time.perf_counter()
        try:
            result = process_frame(prev, frame, self.state, self.cfg)
        except FrameError as exc:
            log.warning("%s", exc)
            self.failures.append((frame.index, str(exc)))
            # labels for the skipped frame cannot be carried forward
            self.state.labelled_mask = None
            return None
        result.timing["total"] = time.perf_counter() - t
        return result

    def run(self, frames) -> list[FrameResult]:
        out = []
        for frame in frames:
            res = self.step(frame)
            if res is not None:
                out.append(res)
        return out
