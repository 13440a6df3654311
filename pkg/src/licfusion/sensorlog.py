"""SensorLog JSON-lines format and ground-truth CSV.

One record per line, keys in a fixed order::

    {"type": "imu", "t": 0.005, "w": [wx, wy, wz], "a": [ax, ay, az]}
    {"type": "lidar", "t": 0.045, "rings": [[[x, y, z], ...], ...]}
    {"type": "cam", "t": 0.092, "tracks": [{"id": 3, "u": 0.1, "v": -0.2}, ...]}

``t`` is in the clock of the sensor that produced the record.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np


class LogFormatError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class ImuRecord:
    t: float
    w: np.ndarray
    a: np.ndarray
    kind: str = field(default="imu", init=False, repr=False)


@dataclass
class LidarRecord:
    t: float
    rings: list  # list of (N_r, 3) arrays
    kind: str = field(default="lidar", init=False, repr=False)


@dataclass
class CamRecord:
    t: float
    tracks: list  # list of (id, u, v)
    kind: str = field(default="cam", init=False, repr=False)


def _floats(values):
    return [float(x) for x in values]


def record_to_dict(rec):
    if rec.kind == "imu":
        return {"type": "imu", "t": float(rec.t), "w": _floats(rec.w), "a": _floats(rec.a)}
    if rec.kind == "lidar":
        rings = [[_floats(p) for p in np.asarray(ring).reshape(-1, 3)] for ring in rec.rings]
        return {"type": "lidar", "t": float(rec.t), "rings": rings}
    if rec.kind == "cam":
        tracks = [{"id": int(i), "u": float(u), "v": float(v)} for i, u, v in rec.tracks]
        return {"type": "cam", "t": float(rec.t), "tracks": tracks}
    raise ValueError(f"unknown record kind {rec.kind!r}")


def _check_finite(obj):
    if isinstance(obj, float):
        return math.isfinite(obj)
    if isinstance(obj, list):
        return all(_check_finite(x) for x in obj)
    if isinstance(obj, dict):
        return all(_check_finite(x) for x in obj.values())
    return True


def record_from_dict(d, line=None):
    try:
        kind = d["type"]
        t = float(d["t"])
        if kind == "imu":
            w = np.array(d["w"], dtype=float)
            a = np.array(d["a"], dtype=float)
            if w.shape != (3,) or a.shape != (3,):
                raise LogFormatError("imu payload needs 3-vectors w and a", line)
            rec = ImuRecord(t, w, a)
        elif kind == "lidar":
            rings = [np.array(r, dtype=float).reshape(-1, 3) for r in d["rings"]]
            rec = LidarRecord(t, rings)
        elif kind == "cam":
            rec = CamRecord(t, [(int(x["id"]), float(x["u"]), float(x["v"])) for x in d["tracks"]])
        else:
            raise LogFormatError(f"unknown record type {kind!r}", line)
    except LogFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise LogFormatError(f"malformed record ({exc})", line) from exc
    if not _check_finite(d):
        raise LogFormatError("non-finite number", line)
    return rec


def dumps_record(rec):
    return json.dumps(record_to_dict(rec), separators=(",", ":"), allow_nan=False)


def write_log(records, path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(dumps_record(rec))
            fh.write("\n")


def iter_log(path):
    """Yield records, validating per-sensor time ordering."""
    last = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LogFormatError(f"invalid JSON ({exc.msg})", lineno) from exc
            if not isinstance(d, dict):
                raise LogFormatError("record is not an object", lineno)
            rec = record_from_dict(d, lineno)
            prev = last.get(rec.kind)
            if prev is not None and rec.t <= prev:
                raise LogFormatError(f"{rec.kind} timestamps not increasing", lineno)
            last[rec.kind] = rec.t
            yield rec


def read_log(path):
    return list(iter_log(path))


TRUTH_HEADER = ["t", "px", "py", "pz", "qx", "qy", "qz", "qw", "vx", "vy", "vz",
                "bgx", "bgy", "bgz", "bax", "bay", "baz"]


LOOP_MARKER = "# loop"


def write_truth_csv(truth, path):
    """Truth CSV; a leading ``# loop`` line declares that the path returns to its start."""
    with open(path, "w", newline="") as fh:
        if getattr(truth, "loop", False):
            fh.write(LOOP_MARKER + "\n")
        w = csv.writer(fh)
        w.writerow(TRUTH_HEADER)
        for row in np.column_stack((truth.t, truth.p, truth.q, truth.v, truth.bg, truth.ba)):
            w.writerow([repr(float(x)) for x in row])


def read_truth_csv(path):
    from .sim import TruthTrajectory

    with open(path) as fh:
        lines = fh.read().splitlines()
    loop = bool(lines) and lines[0].strip() == LOOP_MARKER
    body = [ln for ln in lines if ln.strip() and not ln.startswith("#")]
    if not body:
        raise LogFormatError(f"{path}: empty truth file")
    rows = []
    for lineno, ln in enumerate(body[1:], start=2):
        try:
            rows.append([float(x) for x in ln.split(",")])
        except ValueError as exc:
            raise LogFormatError(f"{path}: bad number ({exc})", lineno) from exc
    data = np.array(rows, dtype=float).reshape(len(rows), -1)
    if data.shape[1] < 11:
        raise LogFormatError(f"{path}: expected at least t,p,q,v columns")
    if not np.all(np.isfinite(data)):
        raise LogFormatError(f"{path}: non-finite value")
    bg = data[:, 11:14] if data.shape[1] >= 14 else np.zeros((len(data), 3))
    ba = data[:, 14:17] if data.shape[1] >= 17 else np.zeros((len(data), 3))
    return TruthTrajectory(data[:, 0], data[:, 1:4], data[:, 4:8], data[:, 8:11], bg, ba, loop=loop)
