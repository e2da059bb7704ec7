"""Command-line front end.

    mbvo synth --preset traffic --out-dir data/traffic
    mbvo run --manifest data/traffic/manifest.txt --out-dir out/traffic
    mbvo eval --manifest data/traffic/manifest.txt --results out/traffic/results.jsonl
    mbvo noise-sweep --preset traffic --kind depth --seeds 20 --out-dir out/sweep
    mbvo ablate --preset traffic --disparity-accuracy 0.2 --flow-sigma 1.0 --out-dir out/ablate

Exit status: 0 on success, 2 on bad arguments, 1 on any runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import scenes
from .dataio import DataError, NoiseSpec, load_ground_truth, load_sequence, read_manifest
from .estimator import SolverConfig
from .experiments import SWEEP_FIELDS, ablate, format_table, noise_sweep, write_csv
from .geometry import GeometryError
from .pipeline import FrameError, MultiBodyOdometry, PipelineConfig
from .report import evaluate, frame_record, read_records, write_records
from .synthetic import SceneError, SyntheticSceneSpec, generate_synthetic

log = logging.getLogger("mbvo")

DEPTH_LEVELS = [0.1, 0.125, 0.15, 0.175, 0.2]
FLOW_LEVELS = [0.09, 0.18, 0.27, 0.36, 0.45]


class CLIError(Exception):
    pass


def _estimation_options(p: argparse.ArgumentParser):
    d = PipelineConfig()
    g = p.add_argument_group("estimation")
    g.add_argument("--seed", type=int, default=0, help="seed for RANSAC and noise draws")
    g.add_argument("--sigma1", type=float, default=1.0, help="std (px) of reprojection residuals")
    g.add_argument("--sigma2", type=float, default=0.5, help="std (px) of the flow prior")
    g.add_argument("--huber-delta", type=float, default=d.solver.huber_delta,
                   help="Huber threshold on whitened residuals")
    g.add_argument("--sf-threshold", type=float, default=d.sf_threshold, help="scene flow magnitude (m)")
    g.add_argument("--sf-proportion", type=float, default=d.sf_proportion,
                   help="moving share above which an object is dynamic")
    g.add_argument("--grid-step", type=int, default=d.grid_step, help="background sampling step (px)")
    g.add_argument("--max-depth-gate", type=float, default=d.max_depth_gate, help="objects beyond (m) are skipped")
    g.add_argument("--min-area-gate", type=float, default=d.min_area_gate,
                   help="objects below this image fraction are skipped")
    g.add_argument("--fps", type=float, default=None, help="frame rate (Hz); omit to use the sequence's frame period")
    g.add_argument("--mode", choices=["joint", "motion-only"], default=d.mode,
                   help="refine the flow jointly with the motion, or keep it fixed")


def _scene_options(p: argparse.ArgumentParser, manifest=True):
    src = p.add_mutually_exclusive_group(required=True)
    if manifest:
        src.add_argument("--manifest", help="sequence manifest with ground truth")
    src.add_argument("--spec", help="synthetic scene description (JSON)")
    src.add_argument("--preset", choices=sorted(scenes.PRESETS), help="built-in synthetic scene")
    p.add_argument("--frames", type=int, default=None, help="frame count for --preset")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="mbvo", description="Multi-body visual odometry on depth + flow + masks.",
                                     formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="process a sequence", formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    _estimation_options(p)

    p = sub.add_parser("synth", help="render a synthetic sequence", formatter_class=fmt)
    _scene_options(p, manifest=False)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None, help="noise seed (overrides the scene's)")
    p.add_argument("--disparity-accuracy", type=float, default=None, help="depth noise (px of disparity)")
    p.add_argument("--flow-sigma", type=float, default=None, help="per-axis flow noise (px)")

    p = sub.add_parser("noise-sweep", help="errors against depth or flow noise", formatter_class=fmt)
    _scene_options(p)
    p.add_argument("--kind", choices=["depth", "flow"], default="depth")
    p.add_argument("--levels", type=float, nargs="+", default=None,
                   help=f"noise levels; default depth {DEPTH_LEVELS}, flow {FLOW_LEVELS}")
    p.add_argument("--seeds", type=int, default=20, help="noise draws per level")
    p.add_argument("--baseline", type=float, default=0.5, help="stereo baseline (m)")
    p.add_argument("--out-dir", required=True)
    _estimation_options(p)

    p = sub.add_parser("ablate", help="motion-only against joint refinement", formatter_class=fmt)
    _scene_options(p)
    p.add_argument("--disparity-accuracy", type=float, default=0.2, help="depth noise (px of disparity)")
    p.add_argument("--flow-sigma", type=float, default=1.0, help="per-axis flow noise (px)")
    p.add_argument("--baseline", type=float, default=0.5, help="stereo baseline (m)")
    p.add_argument("--seeds", type=int, default=20, help="noise draws per mode")
    p.add_argument("--out-dir", required=True)
    _estimation_options(p)

    p = sub.add_parser("eval", help="score saved results against ground truth", formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--results", required=True, help="results.jsonl written by run")
    p.add_argument("--fps", type=float, default=None)
    p.add_argument("--out-dir", default=None, help="write report.json here instead of next to the results")
    return parser


def config_from_args(args) -> PipelineConfig:
    solver = SolverConfig.isotropic(args.sigma1, args.sigma2, huber_delta=args.huber_delta, seed=args.seed)
    return PipelineConfig(solver=solver, mode=args.mode, grid_step=args.grid_step,
                          max_depth_gate=args.max_depth_gate, min_area_gate=args.min_area_gate,
                          sf_threshold=args.sf_threshold, sf_proportion=args.sf_proportion, seed=args.seed)


def _period(args, default):
    if args.fps is None:
        return default
    if not args.fps > 0:
        raise CLIError(f"--fps must be positive, got {args.fps}")
    return 1.0 / args.fps


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, allow_nan=False) + "\n")


def _scene(args):
    """Clean frames and ground truth from --manifest, --spec or --preset."""
    if getattr(args, "manifest", None):
        man = read_manifest(args.manifest)
        gt = load_ground_truth(man)
        if gt is None:
            raise CLIError(f"{args.manifest}: no ground truth in manifest")
        return list(load_sequence(args.manifest)), gt
    if args.spec:
        spec = SyntheticSceneSpec.load(args.spec)
    else:
        kw = {} if args.frames is None else {"n_frames": args.frames}
        spec = scenes.PRESETS[args.preset](**kw)
    return generate_synthetic(replace(spec, noise=None))


def cmd_synth(args):
    if args.spec:
        spec = SyntheticSceneSpec.load(args.spec)
    else:
        kw = {} if args.frames is None else {"n_frames": args.frames}
        spec = scenes.PRESETS[args.preset](**kw)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.disparity_accuracy is not None or args.flow_sigma is not None:
        base = spec.noise or NoiseSpec()
        if args.disparity_accuracy is not None:
            base = replace(base, disparity_accuracy=args.disparity_accuracy)
        if args.flow_sigma is not None:
            base = replace(base, flow_sigma=(args.flow_sigma, args.flow_sigma))
        spec = replace(spec, noise=base)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest, frames, _ = generate_synthetic(spec, out_dir=out)
    spec.save(out / "scene.json")
    print(f"wrote {len(frames)} frames to {manifest}")


def cmd_run(args):
    cfg = config_from_args(args)
    man = read_manifest(args.manifest)
    gt = load_ground_truth(man)
    period = _period(args, man.frame_period)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vo = MultiBodyOdometry(cfg)
    records, timing = [], []
    t0 = time.perf_counter()
    for frame in load_sequence(args.manifest):
        if args.fps is not None:
            frame = replace(frame, frame_period=period)
        res = vo.step(frame)
        if res is not None:
            records.append(frame_record(res))
            timing.append({"frame": res.index, **res.timing})
    elapsed = time.perf_counter() - t0
    write_records(out / "results.jsonl", records)
    report = evaluate(records, gt, _provenance(cfg, args, period), period)
    (out / "report.json").write_text(report.to_json())
    n = len(records)
    _write_json(out / "timing.json", {"frames": timing, "total_s": elapsed,
                                       "fps": n / elapsed if elapsed > 0 else None,
                                       "failures": [list(f) for f in vo.failures]})
    print(f"processed {n} frame pairs in {elapsed:.2f}s; results in {out}")
    _summary(report.to_dict())
    if vo.failures:
        for idx, msg in vo.failures:
            print(f"  frame {idx} skipped: {msg}")


def _provenance(cfg: PipelineConfig, args, period) -> dict:
    return {"pipeline": cfg.to_dict(), "frame_period": period,
            "manifest": getattr(args, "manifest", None), "command": args.command}


def _summary(rep: dict):
    cam = rep["camera"]
    if cam["n"]:
        print(f"camera   E_t {cam['E_t']:.6g} m   E_R {cam['E_R']:.6g} deg   ({cam['n']} frames)")
    for key, o in rep["objects"].items():
        print(f"track {key:>5}  E_t {o['E_t']:.6g} m   E_R {o['E_R']:.6g} deg   ({o['n']} frames)")
    v = rep["velocity"]
    if v["n"]:
        print(f"velocity E_v {v['per_frame_mean_E_v']:.4g} km/h per frame, "
              f"{v['per_track_mean_E_v']:.4g} km/h per track")


def cmd_eval(args):
    man = read_manifest(args.manifest)
    gt = load_ground_truth(man)
    if gt is None:
        raise CLIError(f"{args.manifest}: no ground truth in manifest")
    records = read_records(args.results)
    period = _period(args, man.frame_period)
    report = evaluate(records, gt, {"frame_period": period, "manifest": args.manifest,
                                    "results": args.results, "command": "eval"}, period)
    out = Path(args.out_dir) if args.out_dir else Path(args.results).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    _summary(report.to_dict())


def _with_period(frames, args):
    if args.fps is None:
        return frames
    period = _period(args, None)
    return [replace(f, frame_period=period) for f in frames]


def cmd_sweep(args):
    cfg = config_from_args(args)
    frames, gt = _scene(args)
    frames = _with_period(frames, args)
    levels = args.levels or (DEPTH_LEVELS if args.kind == "depth" else FLOW_LEVELS)
    seeds = range(args.seed, args.seed + args.seeds)
    rows = noise_sweep(frames, gt, args.kind, levels, seeds, cfg, NoiseSpec(baseline=args.baseline))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / f"sweep_{args.kind}.csv", rows)
    print(format_table(rows))


def cmd_ablate(args):
    cfg = config_from_args(args)
    frames, gt = _scene(args)
    frames = _with_period(frames, args)
    noise = NoiseSpec(disparity_accuracy=args.disparity_accuracy, baseline=args.baseline,
                      flow_sigma=(args.flow_sigma, args.flow_sigma))
    rows = ablate(frames, gt, noise, range(args.seed, args.seed + args.seeds), cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "ablation.csv", rows, ["mode"] + [f for f in SWEEP_FIELDS if f not in ("level", "mode")])
    print(format_table(rows, [f for f in SWEEP_FIELDS if f != "level"]))


COMMANDS = {"run": cmd_run, "synth": cmd_synth, "noise-sweep": cmd_sweep, "ablate": cmd_ablate, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (CLIError, DataError, SceneError, FrameError, GeometryError, ValueError) as exc:
        print(f"mbvo {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        where = f"{exc.filename}: " if exc.filename else ""
        print(f"mbvo {args.command}: error: {where}{exc.strerror or exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
