"""Noise-free run on the default world: final pose error after 60 s."""

import argparse

from licfusion.experiments import noise_free_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--duration", type=float, default=61.0)
    args = ap.parse_args()
    trial = noise_free_run(args.duration)
    print(f"t_end {trial.result.t[-1]:.2f} s  position error {trial.final_position_error:.3e} m  "
          f"orientation error {trial.final_rotation_error_deg:.3e} deg  ATE {trial.ate:.3e} m")


if __name__ == "__main__":
    main()
