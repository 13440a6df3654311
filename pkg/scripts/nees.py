"""Monte-Carlo pose NEES against its chi-squared interval."""

import argparse
import csv

import numpy as np

from licfusion.experiments import mc_nees, nees_interval


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--runs", type=int, default=20)
    ap.add_argument("--duration", type=float, default=30.0)
    ap.add_argument("--csv", help="write run-averaged NEES vs time here")
    args = ap.parse_args()
    t, avg = mc_nees(range(args.runs), args.duration)
    lo, hi = nees_interval(6, args.runs)
    value = float(np.mean(avg))
    print(f"average NEES {value:.3f}  interval [{lo:.3f}, {hi:.3f}]  {'inside' if lo <= value <= hi else 'OUTSIDE'}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "nees"])
            w.writerows([repr(float(a)), repr(float(b))] for a, b in zip(t, avg))


if __name__ == "__main__":
    main()
