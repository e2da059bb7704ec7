"""Frames per second of the full pipeline, with a per-stage breakdown."""

import argparse
import time

import numpy as np

from mbvo import scenes
from mbvo.dataio import NoiseSpec, apply_noise
from mbvo.pipeline import MultiBodyOdometry, PipelineConfig
from mbvo.synthetic import generate_synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", default="turning", choices=sorted(scenes.PRESETS))
    ap.add_argument("--frames", type=int, default=10)
    ap.add_argument("--noisy", action="store_true", help="dd 0.2 and 0.5 px flow noise")
    ap.add_argument("--mode", default="joint", choices=["joint", "motion-only"])
    args = ap.parse_args()

    frames, _ = generate_synthetic(scenes.PRESETS[args.preset](n_frames=args.frames))
    if args.noisy:
        frames = apply_noise(frames, NoiseSpec(disparity_accuracy=0.2, flow_sigma=0.5), 0)
    odo = MultiBodyOdometry(PipelineConfig(mode=args.mode))
    t0 = time.perf_counter()
    results = odo.run(frames)
    wall = time.perf_counter() - t0
    print(f"{len(results)} frame pairs in {wall:.2f}s -> {len(results) / wall:.2f} fps")
    for stage in ("camera", "classify", "objects", "total"):
        ms = [r.timing[stage] * 1e3 for r in results]
        print(f"  {stage:9s} mean {np.mean(ms):7.1f} ms   max {np.max(ms):7.1f} ms")


if __name__ == "__main__":
    main()
