"""Online extrinsic and time-offset calibration from perturbed initial guesses."""

import argparse
import csv

from licfusion.experiments import calibration_errors, calibration_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--duration", type=float, default=61.0)
    ap.add_argument("--rot-deg", type=float, default=2.0)
    ap.add_argument("--trans", type=float, default=0.05)
    ap.add_argument("--td", type=float, default=0.005)
    ap.add_argument("--csv", help="write calibration error vs time of the first seed here")
    args = ap.parse_args()
    for seed in args.seeds:
        trial, outcomes = calibration_run(seed, args.duration, args.rot_deg, args.trans, args.td)
        for o in outcomes:
            cover = "covered" if o.rot_covered and o.pos_covered and o.td_covered else "NOT covered"
            print(f"seed {seed} {o.sensor:5s}  rot {o.rot_error_deg:.3f} deg  pos {100 * o.pos_error:.2f} cm  "
                  f"td {1e3 * o.td_error:.3f} ms  3sigma {cover}")
        if args.csv and seed == args.seeds[0]:
            res, rig = trial.result, trial.sim.config.rig
            with open(args.csv, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["t"] + [f"{s}_{k}" for s in ("cam", "lidar") for k in ("rot_deg", "pos_m", "td_s")])
                for k in range(len(res.t)):
                    row = [res.t[k]]
                    for s in ("cam", "lidar"):
                        o = calibration_errors(res, rig, s, index=k)
                        row += [o.rot_error_deg, o.pos_error, o.td_error]
                    w.writerow([repr(float(x)) for x in row])


if __name__ == "__main__":
    main()
