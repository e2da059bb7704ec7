"""Camera and object error against stereo disparity accuracy on the three-car traffic scene."""

import argparse
from pathlib import Path

from mbvo import scenes
from mbvo.experiments import format_table, noise_sweep, write_csv
from mbvo.synthetic import generate_synthetic

LEVELS = [0.1, 0.125, 0.15, 0.175, 0.2]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--frames", type=int, default=4)
    ap.add_argument("--out", default="out/depth_sweep.csv")
    args = ap.parse_args()

    frames, gt = generate_synthetic(scenes.traffic_scene(n_frames=args.frames))
    rows = noise_sweep(frames, gt, "depth", LEVELS, range(args.seeds))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_csv(args.out, rows)
    print(format_table(rows))


if __name__ == "__main__":
    main()
