"""Joint flow refinement against fixed flow, identical noise draws for both."""

import argparse
from pathlib import Path

from mbvo import scenes
from mbvo.dataio import NoiseSpec
from mbvo.experiments import SWEEP_FIELDS, ablate, format_table, write_csv
from mbvo.synthetic import generate_synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--frames", type=int, default=4)
    ap.add_argument("--disparity-accuracy", type=float, default=0.2)
    ap.add_argument("--flow-sigma", type=float, nargs="+", default=[0.3, 1.0])
    ap.add_argument("--out", default="out/ablation.csv")
    args = ap.parse_args()

    frames, gt = generate_synthetic(scenes.traffic_scene(n_frames=args.frames))
    rows = []
    for sigma in args.flow_sigma:
        noise = NoiseSpec(disparity_accuracy=args.disparity_accuracy, flow_sigma=sigma)
        for r in ablate(frames, gt, noise, range(args.seeds)):
            rows.append({**r, "level": sigma})
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_csv(args.out, rows)
    print(format_table(rows, SWEEP_FIELDS))


if __name__ == "__main__":
    main()
