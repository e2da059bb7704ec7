"""Noise sweeps and the joint vs motion-only ablation over seeded noise draws."""

from __future__ import annotations

import csv
from dataclasses import replace

from .dataio import GroundTruth, NoiseSpec, apply_noise
from .metrics import Mean
from .pipeline import MultiBodyOdometry, PipelineConfig
from .report import Report, evaluate

SWEEP_FIELDS = ["level", "mode", "target", "E_t", "E_R", "n", "epe_measured", "epe_refined"]


def run_seeds(frames, gt: GroundTruth, cfg: PipelineConfig, noise: NoiseSpec, seeds) -> Report:
    """Pipeline over one noise draw per seed; the per-seed reports are merged."""
    total = None
    for seed in seeds:
        noisy = apply_noise(frames, noise, seed)
        rep = evaluate(MultiBodyOdometry(replace(cfg, seed=seed)).run(noisy), gt, cfg.to_dict(),
                       frames[0].frame_period)
        total = rep if total is None else total.merge(rep)
    return total


def per_object(rep: Report) -> dict:
    """Pose errors pooled per ground-truth object over all its track labels."""
    out = {}
    for (_, obj), acc in sorted(rep.tracks.items()):
        out[obj] = out[obj].merge(acc) if obj in out else acc
    return out


def _rows(level, mode, rep: Report) -> list[dict]:
    rows = [{"level": level, "mode": mode, "target": "camera", **rep.camera.to_dict()}]
    for obj, acc in per_object(rep).items():
        rows.append({"level": level, "mode": mode, "target": f"object{obj}", **acc.to_dict()})
    for region in ("static", "object"):
        m = rep.epe.get(f"{region}_measured", Mean())
        r = rep.epe.get(f"{region}_refined", Mean())
        if m.count:
            rows.append({"level": level, "mode": mode, "target": f"flow_{region}", "n": m.count,
                         "epe_measured": m.value, "epe_refined": r.value})
    return rows


def noise_sweep(frames, gt, kind: str, levels, seeds, cfg: PipelineConfig | None = None,
                base: NoiseSpec | None = None) -> list[dict]:
    """Error-vs-noise table. ``kind`` is "depth" (disparity accuracy) or
    "flow" (per-axis flow sigma in px)."""
    cfg = cfg or PipelineConfig()
    base = base or NoiseSpec()
    rows = []
    for level in levels:
        if kind == "depth":
            noise = replace(base, disparity_accuracy=float(level))
        elif kind == "flow":
            noise = replace(base, flow_sigma=(float(level), float(level)))
        else:
            raise ValueError(f"unknown sweep kind {kind!r}")
        rows += _rows(level, cfg.mode, run_seeds(frames, gt, cfg, noise, seeds))
    return rows


def ablate(frames, gt, noise: NoiseSpec, seeds, cfg: PipelineConfig | None = None) -> list[dict]:
    """Motion-only and joint runs on identical noise draws."""
    cfg = cfg or PipelineConfig()
    rows = []
    for mode in ("motion-only", "joint"):
        rows += _rows(None, mode, run_seeds(frames, gt, replace(cfg, mode=mode), noise, seeds))
    return rows


def write_csv(path, rows, fields=SWEEP_FIELDS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in fields})


def format_table(rows, fields=SWEEP_FIELDS) -> str:
    def cell(v):
        if v is None:
            return "-"
        return f"{v:.6g}" if isinstance(v, float) else str(v)

    table = [fields] + [[cell(r.get(k)) for k in fields] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(fields))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in table)

