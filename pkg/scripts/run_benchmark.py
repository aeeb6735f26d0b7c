"""Track and map the 60-frame orbit under the pruning and downsampling ablations.

    python scripts/run_benchmark.py --seed 0 --layout volume
"""
import argparse
import time

from splatsim.slam import TrackerConfig, run_sequence
from splatsim.synthetic import gen_scene, gen_sequence_frames

CONFIGS = {
    "unpruned": dict(pruning=False),
    "full-res": dict(pruning=False, downsampling=False),
    "cap 0.5": dict(prune_cap=0.5),
    "cap 0.6": dict(prune_cap=0.6),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--count", type=int, default=500)
    ap.add_argument("--frames", type=int, default=60)
    ap.add_argument("--layout", choices=("volume", "surface"), default="volume")
    ap.add_argument("--only", nargs="*", choices=list(CONFIGS), help="subset of configurations")
    args = ap.parse_args()

    frames = gen_sequence_frames(gen_scene(args.seed, args.count, 1.0, layout=args.layout), "orbit", args.frames)
    print(f"{'config':<10} {'ATE mm':>8} {'PSNR dB':>8} {'gaussians':>9} {'pixels':>10} {'time s':>7}")
    for name in args.only or CONFIGS:
        t0 = time.perf_counter()
        rep = run_sequence(frames, TrackerConfig(**CONFIGS[name]))
        dt = time.perf_counter() - t0
        print(f"{name:<10} {rep.ate_rmse * 1e3:8.2f} {rep.mean_psnr:8.2f} {rep.gaussian_counts[-1]:9d} {rep.total_pixels:10d} {dt:7.1f}")


if __name__ == "__main__":
    main()
