"""Command-line entry point: ``licfusion {simulate,run,eval,selftest}``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .config import SCHEMA_VERSION, ConfigError, dump_json, load_json, to_dict
from .estimator import DivergenceError, EstimatorConfig, ExtrinsicsGuess, InitializationError, run_estimator
from .metrics import MetricsError, Trajectory, compute_metrics
from .propagation import PropagationError
from .sensorlog import LogFormatError, read_log, read_truth_csv, write_log, write_truth_csv
from .sim import SimConfig, SpanError, simulate

# exit codes per diagnostic category
EXIT_CODES = {
    "usage": 2,
    "config": 3,
    "log": 4,
    "initialization": 5,
    "divergence": 6,
    "metrics": 7,
    "io": 8,
    "selftest": 9,
}


class CliError(Exception):
    def __init__(self, category, message):
        self.category = category
        super().__init__(message)


def _out_dir(path):
    if path is None:
        raise CliError("usage", "--out DIR is required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if not isinstance(x, str) else x for x in row])


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, **obj}, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- verbs


def cmd_simulate(args):
    sim_cfg = load_json(SimConfig, args.config, "sim") if args.config else SimConfig()
    out = _out_dir(args.out)
    result = simulate(sim_cfg, args.seed)
    write_log(result.records, out / "log.jsonl")
    write_truth_csv(result.truth, out / "truth.csv")
    est = EstimatorConfig(use_camera=sim_cfg.use_camera, use_lidar=sim_cfg.use_lidar)
    est.init.mode = "truth"
    est.init.cam = ExtrinsicsGuess.from_extrinsics(sim_cfg.rig.cam)
    est.init.lidar = ExtrinsicsGuess.from_extrinsics(sim_cfg.rig.lidar)
    est.camera.intrinsics = sim_cfg.camera
    dump_json({"sim": sim_cfg, "estimator": est}, out / "config.json")
    counts = {k: sum(r.kind == k for r in result.records) for k in ("imu", "lidar", "cam")}
    print(f"wrote {len(result.records)} records {counts} to {out / 'log.jsonl'}")
    return 0


def _calib_rows(res):
    cam, lid = res.calib["cam"], res.calib["lidar"]
    for k in range(len(res.t)):
        row = [res.t[k]]
        for c in (cam, lid):
            row += list(c["q"][k]) + list(c["p"][k]) + [c["td"][k]] + list(c["sigma"][k])
        yield row


def _calib_header():
    names = []
    for s in ("cam", "lidar"):
        names += [f"{s}_q{a}" for a in "xyzw"] + [f"{s}_p{a}" for a in "xyz"] + [f"{s}_td"]
        names += [f"{s}_sigma_r{a}" for a in "xyz"] + [f"{s}_sigma_p{a}" for a in "xyz"] + [f"{s}_sigma_td"]
    return ["t"] + names


def write_results(res, out: Path):
    traj_header = ["t", "px", "py", "pz", "qx", "qy", "qz", "qw", "vx", "vy", "vz", "sensor"]
    _write_csv(out / "trajectory.csv", traj_header,
               ([res.t[k], *res.p[k], *res.q[k], *res.v[k], res.sensor[k]] for k in range(len(res.t))))
    _write_csv(out / "calibration.csv", _calib_header(), _calib_rows(res))
    _write_csv(out / "nees.csv", ["t", "nees"] + [f"sigma_{n}" for n in ("rx", "ry", "rz", "px", "py", "pz")],
               ([res.t[k], res.nees[k], *res.pose_sigma[k]] for k in range(len(res.t))))
    final = {}
    if len(res.t):
        final = {"t": float(res.t[-1]), "p": res.p[-1].tolist(), "q": res.q[-1].tolist(),
                 "calibration": {s: {"q": c["q"][-1].tolist(), "p": c["p"][-1].tolist(),
                                     "td": float(c["td"][-1])} for s, c in res.calib.items()}}
    nees = res.nees[np.isfinite(res.nees)] if len(res.nees) else np.zeros(0)
    _write_json(out / "results.json", {
        "poses": len(res.t),
        "diagnostics": to_dict(res.diagnostics),
        "final": final,
        "mean_nees": float(nees.mean()) if len(nees) else None,
        "files": ["trajectory.csv", "calibration.csv", "nees.csv"],
    })


def cmd_run(args):
    if args.log is None:
        raise CliError("usage", "run needs --log PATH")
    cfg = load_json(EstimatorConfig, args.config, "estimator") if args.config else EstimatorConfig()
    out = _out_dir(args.out)
    records = read_log(args.log)
    truth = read_truth_csv(args.truth) if args.truth else None
    res = run_estimator(cfg, records, truth)
    write_results(res, out)
    print(f"{len(res.t)} poses, diagnostics {to_dict(res.diagnostics)}; results in {out}")
    return 0


def _read_trajectory(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CliError("metrics", f"{path}: empty trajectory")
    data = np.array([[float(x) for x in r[:4]] for r in rows[1:]], dtype=float).reshape(-1, 4)
    return Trajectory(data[:, 0], data[:, 1:4])


def cmd_eval(args):
    if args.truth is None:
        raise CliError("usage", "eval needs --truth PATH")
    if args.out is None:
        raise CliError("usage", "eval needs --out DIR holding the run results")
    out = Path(args.out)
    traj_path = Path(args.log) if args.log else out / "trajectory.csv"
    if not traj_path.exists():
        raise CliError("io", f"{traj_path} not found")
    est = _read_trajectory(traj_path)
    truth = read_truth_csv(args.truth)
    aligned = True
    if args.config:
        with open(args.config) as fh:
            aligned = bool(json.load(fh).get("eval", {}).get("aligned", True))
    m = compute_metrics(est, Trajectory(truth.t, truth.p, truth.loop), aligned=aligned)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "mse.csv", ["t", "squared_error"], zip(m.mse_t, m.mse))
    _write_json(out / "metrics.json", {
        "ate": m.ate, "start_end": m.start_end, "pairs": int(len(m.mse)), "aligned": aligned,
        "rotation": m.rotation.tolist(), "translation": m.translation.tolist(),
    })
    se = "n/a" if m.start_end is None else f"{m.start_end:.4f} m"
    print(f"ATE {m.ate:.4f} m over {len(m.mse)} poses, start-end {se}")
    return 0


def cmd_selftest(args):
    from .selftest import check_compression, run_jacobian_suite

    results, seconds = run_jacobian_suite(seed=args.seed)
    results.append(check_compression(np.random.default_rng(args.seed)))
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:36s} configs={r.configs} max_rel_err={r.max_rel_error:.2e}")
    print(f"{seconds:.1f} s")
    if args.out:
        out = _out_dir(args.out)
        _write_json(out / "selftest.json", {"checks": [
            {"name": r.name, "configs": r.configs, "max_rel_error": r.max_rel_error, "passed": r.passed}
            for r in results]})
    if not all(r.passed for r in results):
        raise CliError("selftest", "finite-difference checks failed")
    return 0


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "eval": cmd_eval, "selftest": cmd_selftest}


def build_parser():
    p = argparse.ArgumentParser(prog="licfusion", description="LiDAR-inertial-camera filter tools")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON config with schema_version")
    p.add_argument("--log", help="sensor log (run) or trajectory CSV (eval)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--truth", help="ground-truth CSV")
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CODES["usage"] if exc.code else 0
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        category, msg = exc.category, str(exc)
    except ConfigError as exc:
        category, msg = "config", str(exc)
    except (LogFormatError, PropagationError) as exc:
        category, msg = "log", str(exc)
    except InitializationError as exc:
        category, msg = "initialization", str(exc)
    except DivergenceError as exc:
        category, msg = "divergence", str(exc)
    except (MetricsError, SpanError) as exc:
        category, msg = "metrics", str(exc)
    except OSError as exc:
        category, msg = "io", str(exc)
    print(f"error [{category}]: {msg}", file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
