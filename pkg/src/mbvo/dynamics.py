"""Scene flow, dynamic/static classification and object identity tracking."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import SE3Pose
from .metrics import object_velocity

DEFAULT_SF_THRESHOLD = 0.12
DEFAULT_SF_PROPORTION = 0.3


class Status(str, enum.Enum):
    DYNAMIC = "dynamic"
    STATIC = "static"
    LOST = "lost"


def compute_scene_flow(m_prev, m_curr, T: SE3Pose) -> np.ndarray:
    """Camera-compensated 3D displacement ``m_prev - T m_curr``; zero for static points.

    ``m_prev`` is in camera k-1 coordinates, ``m_curr`` in camera k coordinates.
    """
    return np.asarray(m_prev, dtype=float) - T.apply(m_curr)


def dynamic_fraction(flows, mag_threshold: float = DEFAULT_SF_THRESHOLD) -> float:
    flows = np.asarray(flows, dtype=float).reshape(-1, 3)
    if len(flows) == 0:
        raise ValueError("no scene flow vectors")
    return float(np.mean(np.linalg.norm(flows, axis=1) > mag_threshold))


def classify_object(flows, mag_threshold: float = DEFAULT_SF_THRESHOLD,
                    dyn_proportion: float = DEFAULT_SF_PROPORTION) -> Status:
    """Dynamic iff the share of points moving more than ``mag_threshold`` exceeds ``dyn_proportion``."""
    if dynamic_fraction(flows, mag_threshold) > dyn_proportion:
        return Status.DYNAMIC
    return Status.STATIC


@dataclass
class TrackLabelSet:
    """Persistent track labels for the instances of one frame's mask.

    ``active`` maps instance id -> label (0 = static/background). Labels come
    from a monotone counter and are never reissued. ``unmatched`` lists the
    instances that received no correspondence from the previous frame.
    """

    next_label: int = 1
    active: dict = field(default_factory=dict)
    unmatched: frozenset = frozenset()

    def issue(self) -> int:
        label = self.next_label
        self.next_label += 1
        return label

    def label_of(self, instance_id: int) -> int:
        return self.active.get(instance_id, 0)

    def label_image(self, mask) -> np.ndarray:
        mask = np.asarray(mask)
        lut = np.zeros(int(mask.max(initial=0)) + 1, dtype=np.int64)
        for iid, label in self.active.items():
            if iid < len(lut):
                lut[iid] = label
        return lut[mask]


def label_votes(mask_prev, labels_prev: TrackLabelSet | None, mask_curr, flow) -> dict:
    """Previous-frame labels carried into each current instance by the flow.

    Every previous pixel is moved by its flow and rounded to the nearest
    pixel; correspondences that leave the image or have no valid flow cannot
    belong to a current instance and cast no vote. Returns
    ``{instance_id: {label: count}}``.
    """
    mask_curr = np.asarray(mask_curr)
    h, w = mask_curr.shape
    votes = {int(i): {} for i in np.unique(mask_curr) if i > 0}
    if mask_prev is None or flow is None:
        return votes
    lab = labels_prev.label_image(mask_prev) if labels_prev is not None else np.zeros(mask_curr.shape, np.int64)
    flow = np.asarray(flow, dtype=float)
    vv, uu = np.mgrid[0:h, 0:w]
    with np.errstate(invalid="ignore"):
        tu = np.rint(uu + flow[..., 0])
        tv = np.rint(vv + flow[..., 1])
    ok = np.isfinite(tu) & np.isfinite(tv) & (tu >= 0) & (tu < w) & (tv >= 0) & (tv < h)
    tgt = mask_curr[tv[ok].astype(np.intp), tu[ok].astype(np.intp)].astype(np.int64)
    src = lab[ok]
    keep = tgt > 0
    if not keep.any():
        return votes
    pairs, counts = np.unique(np.stack([tgt[keep], src[keep]]), axis=1, return_counts=True)
    for (iid, label), cnt in zip(pairs.T, counts):
        votes[int(iid)][int(label)] = int(cnt)
    return votes


def _modal(counts: dict) -> tuple[int, int]:
    # highest count, ties to the smaller label: independent of point order
    label = min(counts, key=lambda l: (-counts[l], l))
    return label, counts[label]


def propagate_labels(mask_prev, labels_prev: TrackLabelSet | None, mask_curr, flow,
                     dynamic: dict | None = None) -> TrackLabelSet:
    """Label the instances of ``mask_curr`` by majority vote over flow correspondences.

    ``dynamic`` maps current instance id -> bool (missing ids count as
    dynamic). A dynamic instance whose modal label is 0, or that has no
    correspondences at all, is issued a fresh label; a static one keeps 0.
    When two instances claim the same label the one with more votes keeps it.
    The returned set continues the label counter of ``labels_prev``.
    """
    out = TrackLabelSet(next_label=labels_prev.next_label if labels_prev is not None else 1)
    votes = label_votes(mask_prev, labels_prev, mask_curr, flow)
    dynamic = dynamic or {}
    unmatched = set()
    claims = {}
    for iid in sorted(votes):
        if not votes[iid]:
            unmatched.add(iid)
            continue
        label, cnt = _modal(votes[iid])
        if label != 0:
            claims.setdefault(label, []).append((-cnt, iid))
    winners = {min(c)[1]: label for label, c in claims.items()}
    for iid in sorted(votes):
        if iid in winners:
            out.active[iid] = winners[iid]
        elif dynamic.get(iid, True):
            out.active[iid] = out.issue()
        else:
            out.active[iid] = 0
    out.unmatched = frozenset(unmatched)
    return out


@dataclass(frozen=True)
class TrackRecord:
    frame: int
    motion: SE3Pose
    centroid: tuple
    area: float
    n_points: int
    mean_depth: float
    velocity: float


@dataclass(frozen=True)
class ObjectTrack:
    label: int
    records: tuple = ()
    status: Status = Status.DYNAMIC

    @property
    def velocities(self) -> list[float]:
        return [r.velocity for r in self.records]

    @property
    def frames(self) -> list[int]:
        return [r.frame for r in self.records]

    def __len__(self):
        return len(self.records)


def update_track(track: ObjectTrack, H: SE3Pose, centroid, area: float, *, frame: int,
                 frame_period: float = 0.1, n_points: int = 0, mean_depth: float | None = None,
                 status: Status | None = None) -> ObjectTrack:
    """Append one frame's motion record; ``H`` and ``centroid`` share the camera k-1 frame."""
    c = np.asarray(centroid, dtype=float).reshape(3)
    if not c[2] > 0:
        raise ValueError("centroid must lie in front of the camera")
    if track.records and frame <= track.records[-1].frame:
        raise ValueError(f"frame {frame} does not follow {track.records[-1].frame}")
    v = object_velocity(H, c, frame_period)
    rec = TrackRecord(frame, H, tuple(c.tolist()), float(area), int(n_points),
                      float(c[2] if mean_depth is None else mean_depth), v)
    if status is None:
        status = Status.DYNAMIC if v > 0 else Status.STATIC
    return replace(track, records=track.records + (rec,), status=status)
