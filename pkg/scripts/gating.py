"""Chi-squared gate acceptance of LiDAR inliers and rejection of displaced outliers."""

import argparse

from licfusion.experiments import gate_statistics


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--duration", type=float, default=15.0)
    ap.add_argument("--outlier", type=float, default=1.0, help="outlier displacement (m)")
    args = ap.parse_args()
    s = gate_statistics(range(args.seeds), args.duration, args.outlier)
    print(f"inliers {s.inliers}  accepted {100 * s.acceptance:.2f}%")
    print(f"outliers {s.outliers}  rejected {100 * s.rejection:.2f}%")
    print(f"wrong associations left out {s.mismatched}")


if __name__ == "__main__":
    main()
