"""Object error against flow noise, gates disabled so the far car is estimated too."""

import argparse
from pathlib import Path

from mbvo import scenes
from mbvo.experiments import format_table, noise_sweep, write_csv
from mbvo.pipeline import PipelineConfig
from mbvo.synthetic import generate_synthetic

LEVELS = [0.09, 0.18, 0.27, 0.36, 0.45]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--frames", type=int, default=4)
    ap.add_argument("--keep-gates", action="store_true", help="use the default depth/area gates")
    ap.add_argument("--out", default="out/flow_sweep.csv")
    args = ap.parse_args()

    cfg = PipelineConfig() if args.keep_gates else PipelineConfig(max_depth_gate=1e9, min_area_gate=0.0)
    frames, gt = generate_synthetic(scenes.traffic_scene(n_frames=args.frames))
    rows = noise_sweep(frames, gt, "flow", LEVELS, range(args.seeds), cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_csv(args.out, rows)
    print(format_table(rows))


if __name__ == "__main__":
    main()
