"""Per-frame result records and the evaluation report.

Per-frame records are written one JSON object per line (``results.jsonl``);
field order is fixed by the builders below::

    {"frame": k,
     "camera": {"motion": [12], "pose": [12], "init": str, "candidates": {str: int},
                "n_points": int, "n_inliers": int, "cost": float, "iterations": int,
                "converged": bool, "epe": {...} | null},
     "objects": [{"instance": int, "label": int, "status": str, ...,
                  "motion": [12] | null, "centroid": [3] | null, "velocity": float | null, ...}],
     "labels": {"instance": label}}

Poses are the 12 row-major entries of ``[R | t]``. ``motion`` of an object
is its frame-to-frame motion in camera k-1 coordinates. Non-finite floats
are written as null.

The report is a single JSON document. It holds no wall-clock numbers, so
two runs with the same inputs and seed produce identical bytes; timings go
to a separate file.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import GroundTruth
from .geometry import SE3Pose
from .metrics import Mean, object_velocity, pose_change_error, velocity_error
from .pipeline import FrameResult

REPORT_FORMAT = "mbvo-report 1"


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def pose_to_list(p: SE3Pose | None):
    return None if p is None else [float(v) for v in p.matrix3x4().reshape(-1)]


def pose_from_list(v) -> SE3Pose | None:
    if v is None:
        return None
    return SE3Pose.from_matrix(np.vstack([np.reshape(v, (3, 4)), [0, 0, 0, 1]]), normalize=True)


def _epe_dict(d):
    return None if d is None else {k: _num(v) for k, v in d.items()}


def frame_record(res: FrameResult) -> dict:
    cam = res.camera
    objects = []
    for o in res.objects:
        objects.append({
            "instance": int(o.instance_id),
            "label": int(o.label),
            "status": o.status,
            "dynamic_fraction": _num(o.dynamic_fraction),
            "n_classified": int(o.n_classified),
            "area": _num(o.area),
            "mean_depth": _num(o.mean_depth),
            "n_points": int(o.n_points),
            "gated": bool(o.gated),
            "estimated": bool(o.estimated),
            "reason": o.reason,
            "motion": pose_to_list(o.motion),
            "centroid": None if o.centroid is None else [float(c) for c in o.centroid],
            "velocity": _num(o.velocity),
            "n_inliers": int(o.n_inliers),
            "cost": _num(o.cost),
            "iterations": int(o.iterations),
            "new_label": bool(o.new_label),
            "epe": _epe_dict(o.epe),
        })
    return {
        "frame": int(res.index),
        "camera": {
            "motion": pose_to_list(cam.motion),
            "pose": pose_to_list(res.camera_pose),
            "init": cam.init_source,
            "candidates": {str(k): int(v) for k, v in cam.candidates.items()},
            "n_points": int(cam.n_points),
            "n_inliers": int(cam.n_inliers),
            "cost": _num(cam.cost),
            "iterations": int(cam.iterations),
            "converged": bool(cam.converged),
            "epe": _epe_dict(cam.epe),
        },
        "objects": objects,
        "labels": {str(k): int(v) for k, v in sorted(res.labels.items())},
    }


def dumps(obj) -> str:
    return json.dumps(obj, allow_nan=False)


def write_records(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(dumps(r) + "\n")


def read_records(path) -> list[dict]:
    path = Path(path)
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{n}: {exc}") from exc
    return out


@dataclass
class _Acc:
    """Mergeable accumulators behind one report section."""

    t: Mean = field(default_factory=Mean)
    r: Mean = field(default_factory=Mean)

    def add(self, err):
        self.t.add(err.t)
        self.r.add(err.r)

    def merge(self, other: "_Acc") -> "_Acc":
        return _Acc(self.t.merge(other.t), self.r.merge(other.r))

    def to_dict(self):
        return {"E_t": self.t.value, "E_R": self.r.value, "n": self.t.count}


@dataclass
class Report:
    """Evaluation of a run against ground truth.

    Aggregates are plain means over their per-frame entries. All
    accumulators merge, so reports over consecutive chunks of a sequence
    combine into the whole-sequence report.
    """

    config: dict
    frame_period: float
    frames: list = field(default_factory=list)
    camera: _Acc = field(default_factory=_Acc)
    tracks: dict = field(default_factory=dict)
    track_velocity: dict = field(default_factory=dict)
    velocity: Mean = field(default_factory=Mean)
    epe: dict = field(default_factory=dict)
    confusion: dict = field(default_factory=lambda: {"tp": 0, "fp": 0, "tn": 0, "fn": 0, "unknown": 0})

    def merge(self, other: "Report") -> "Report":
        out = Report(self.config, self.frame_period, self.frames + other.frames,
                     self.camera.merge(other.camera), velocity=self.velocity.merge(other.velocity))
        for attr in ("tracks", "track_velocity", "epe"):
            a, b = getattr(self, attr), getattr(other, attr)
            merged = dict(a)
            for k, v in b.items():
                merged[k] = merged[k].merge(v) if k in merged else v
            setattr(out, attr, merged)
        out.confusion = {k: self.confusion[k] + other.confusion[k] for k in self.confusion}
        return out

    def per_track_velocity_error(self):
        vals = [m.value for _, m in sorted(self.track_velocity.items()) if m.count]
        return float(np.mean(vals)) if vals else None

    def classification_accuracy(self):
        c = self.confusion
        n = c["tp"] + c["fp"] + c["tn"] + c["fn"]
        return (c["tp"] + c["tn"]) / n if n else None

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "config": self.config,
            "frame_period": self.frame_period,
            "n_frames": len(self.frames),
            "camera": self.camera.to_dict(),
            "objects": {f"{k[0]}:{k[1]}": {"label": k[0], "object": k[1], **v.to_dict()}
                        for k, v in sorted(self.tracks.items())},
            "velocity": {
                "per_track_mean_E_v": self.per_track_velocity_error(),
                "per_frame_mean_E_v": self.velocity.value,
                "n": self.velocity.count,
                "tracks": {f"{k[0]}:{k[1]}": {"label": k[0], "object": k[1], "mean_E_v": m.value, "n": m.count}
                           for k, m in sorted(self.track_velocity.items())},
            },
            "epe": {k: {"mean": m.value, "n": m.count} for k, m in sorted(self.epe.items())},
            "classification": {**self.confusion, "accuracy": self.classification_accuracy()},
            "frames": self.frames,
        }

    def to_json(self) -> str:
        return json.dumps(_clean(self.to_dict()), indent=1, allow_nan=False) + "\n"


def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, float):
        return _num(x)
    return x


def evaluate(records, gt: GroundTruth | None, config: dict | None = None, frame_period: float = 0.1) -> Report:
    """Compare per-frame records (dicts or ``FrameResult``) with ground truth.

    Object observations in the record of frame k belong to frame k-1's
    instances. The reference velocity of an object uses the estimated
    centroid, so E_v isolates the motion error.
    """
    rep = Report(config or {}, frame_period)
    for rec in records:
        if isinstance(rec, FrameResult):
            rec = frame_record(rec)
        k = rec["frame"]
        entry = {"frame": k, "camera": None, "objects": []}
        T = pose_from_list(rec["camera"]["motion"])
        if gt is not None and k in gt.camera_poses and k - 1 in gt.camera_poses:
            err = pose_change_error(T, gt.camera_motion(k))
            rep.camera.add(err)
            entry["camera"] = {"E_t": err.t, "E_R": err.r}
        if rec["camera"].get("epe"):
            _add_epe(rep, "static", rec["camera"]["epe"])
        for o in rec["objects"]:
            obj = gt.object_of(k - 1, o["instance"]) if gt is not None else None
            oe = {"instance": o["instance"], "label": o["label"], "object": obj, "status": o["status"]}
            entry["objects"].append(oe)
            if obj is None:
                if gt is not None:
                    rep.confusion["unknown"] += 1
                continue
            truth = gt.is_dynamic(obj, k)
            if o["dynamic_fraction"] is None:
                rep.confusion["unknown"] += 1
            else:
                pred = o["status"] == "dynamic"
                rep.confusion[("t" if pred == truth else "f") + ("p" if pred else "n")] += 1
            oe["dynamic_gt"] = truth
            if not o["estimated"]:
                continue
            H = pose_from_list(o["motion"])
            err = pose_change_error(H, gt.object_motion(obj, k))
            key = (o["label"], obj)
            rep.tracks.setdefault(key, _Acc()).add(err)
            v_gt = object_velocity(gt.object_motion(obj, k), o["centroid"], frame_period)
            ev = velocity_error(o["velocity"], v_gt)
            rep.velocity.add(ev)
            rep.track_velocity.setdefault(key, Mean()).add(ev)
            oe.update({"E_t": err.t, "E_R": err.r, "v": o["velocity"], "v_gt": v_gt, "E_v": ev})
            if o.get("epe"):
                _add_epe(rep, "object", o["epe"])
        rep.frames.append(entry)
    return rep


def _add_epe(rep: Report, region: str, d: dict):
    for k, v in d.items():
        if v is not None:
            rep.epe.setdefault(f"{region}_{k}", Mean()).add(v)
