"""ATE of LiDAR+camera fusion against camera-only and LiDAR-only runs."""

import argparse

from licfusion.experiments import fusion_trend


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--duration", type=float, default=30.0)
    args = ap.parse_args()
    mean, per_seed = fusion_trend(range(args.seeds), args.duration)
    for name, values in per_seed.items():
        print(f"{name:7s} mean ATE {mean[name]:.4f} m  per seed {[round(v, 4) for v in values]}")


if __name__ == "__main__":
    main()
