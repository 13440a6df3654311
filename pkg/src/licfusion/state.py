"""Filter state, error-state index map and covariance bookkeeping.

Error-state layout (all blocks contiguous, in this order)::

    imu          15   [dtheta, dbg, dv, dba, dp]
    cam_calib     7   [dtheta, dp, dt]
    lidar_calib   7   [dtheta, dp, dt]
    cam clones    6 each   [dtheta, dp]
    lidar clones  6 each   [dtheta, dp]
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .rotation import IDENTITY_QUAT, exp_quat, quat_multiply

IMU_DIM = 15
CALIB_DIM = 7
CLONE_DIM = 6

# offsets inside the IMU block
THETA, BG, VEL, BA, POS = 0, 3, 6, 9, 12
# offsets inside a calibration block
CAL_ROT, CAL_POS, CAL_TD = 0, 3, 6
# offsets inside a clone block
CL_ROT, CL_POS = 0, 3

CAM_CALIB_OFFSET = IMU_DIM
LIDAR_CALIB_OFFSET = IMU_DIM + CALIB_DIM
CLONES_OFFSET = IMU_DIM + 2 * CALIB_DIM


class Sensor(enum.Enum):
    CAMERA = "cam"
    LIDAR = "lidar"


class StateError(ValueError):
    pass


@dataclass
class ImuState:
    q: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())  # ^I_G q
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))  # ^G v_I
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))  # ^G p_I

    def copy(self):
        return ImuState(self.q.copy(), self.bg.copy(), self.v.copy(), self.ba.copy(), self.p.copy())


@dataclass
class SensorExtrinsics:
    """Sensor-from-IMU rotation, sensor-frame IMU position, and clock offset."""

    q: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    td: float = 0.0

    def copy(self):
        return SensorExtrinsics(self.q.copy(), self.p.copy(), float(self.td))


@dataclass
class ClonePose:
    q: np.ndarray
    p: np.ndarray
    t: float  # IMU-clock time
    sensor: Sensor

    def copy(self):
        return ClonePose(self.q.copy(), self.p.copy(), self.t, self.sensor)


@dataclass
class FullState:
    imu: ImuState
    cam_calib: SensorExtrinsics
    lidar_calib: SensorExtrinsics
    cov: np.ndarray
    t: float = 0.0
    cam_clones: list = field(default_factory=list)
    lidar_clones: list = field(default_factory=list)

    @classmethod
    def initial(cls, imu, cam_calib, lidar_calib, cov, t=0.0):
        cov = np.array(cov, dtype=float)
        if cov.shape != (CLONES_OFFSET, CLONES_OFFSET):
            raise StateError(f"initial covariance must be {CLONES_OFFSET}x{CLONES_OFFSET}")
        return cls(imu, cam_calib, lidar_calib, symmetrize(cov), t)

    @property
    def dim(self):
        return CLONES_OFFSET + CLONE_DIM * (len(self.cam_clones) + len(self.lidar_clones))

    def calib(self, sensor):
        return self.cam_calib if sensor is Sensor.CAMERA else self.lidar_calib

    def calib_offset(self, sensor):
        return CAM_CALIB_OFFSET if sensor is Sensor.CAMERA else LIDAR_CALIB_OFFSET

    def clones(self, sensor):
        return self.cam_clones if sensor is Sensor.CAMERA else self.lidar_clones

    def clone_offset(self, sensor, index):
        clones = self.clones(sensor)
        if not -len(clones) <= index < len(clones):
            raise IndexError(f"{sensor.value} clone index {index} out of range")
        index %= len(clones)
        base = CLONES_OFFSET
        if sensor is Sensor.LIDAR:
            base += CLONE_DIM * len(self.cam_clones)
        return base + CLONE_DIM * index

    def index_map(self):
        """Map of block name to slice; blocks tile ``[0, dim)`` in order."""
        out = {
            "imu": slice(0, IMU_DIM),
            "cam_calib": slice(CAM_CALIB_OFFSET, CAM_CALIB_OFFSET + CALIB_DIM),
            "lidar_calib": slice(LIDAR_CALIB_OFFSET, LIDAR_CALIB_OFFSET + CALIB_DIM),
        }
        for sensor in (Sensor.CAMERA, Sensor.LIDAR):
            for i in range(len(self.clones(sensor))):
                o = self.clone_offset(sensor, i)
                out[f"{sensor.value}_clone_{i}"] = slice(o, o + CLONE_DIM)
        return out

    def copy(self):
        return FullState(
            self.imu.copy(), self.cam_calib.copy(), self.lidar_calib.copy(),
            self.cov.copy(), self.t,
            [c.copy() for c in self.cam_clones], [c.copy() for c in self.lidar_clones],
        )


def symmetrize(P):
    return 0.5 * (P + P.T)


def _rotate(q, dtheta):
    return quat_multiply(exp_quat(dtheta), q)


def boxplus(state: FullState, delta) -> FullState:
    """Apply an error-state correction: Euclidean on vectors, left error quaternion on rotations."""
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (state.dim,):
        raise StateError(f"delta has shape {delta.shape}, state dimension is {state.dim}")
    out = state.copy()
    imu = out.imu
    imu.q = _rotate(imu.q, delta[THETA:THETA + 3])
    imu.bg = imu.bg + delta[BG:BG + 3]
    imu.v = imu.v + delta[VEL:VEL + 3]
    imu.ba = imu.ba + delta[BA:BA + 3]
    imu.p = imu.p + delta[POS:POS + 3]
    for calib, o in ((out.cam_calib, CAM_CALIB_OFFSET), (out.lidar_calib, LIDAR_CALIB_OFFSET)):
        calib.q = _rotate(calib.q, delta[o + CAL_ROT:o + CAL_ROT + 3])
        calib.p = calib.p + delta[o + CAL_POS:o + CAL_POS + 3]
        calib.td = calib.td + float(delta[o + CAL_TD])
    for sensor in (Sensor.CAMERA, Sensor.LIDAR):
        for i, clone in enumerate(out.clones(sensor)):
            o = out.clone_offset(sensor, i)
            clone.q = _rotate(clone.q, delta[o + CL_ROT:o + CL_ROT + 3])
            clone.p = clone.p + delta[o + CL_POS:o + CL_POS + 3]
    return out


def marginalize_clone(state: FullState, sensor: Sensor, index: int) -> FullState:
    """Drop one clone and its covariance rows/columns."""
    clones = state.clones(sensor)
    if not 0 <= index < len(clones):
        raise IndexError(f"no {sensor.value} clone at index {index} (window has {len(clones)})")
    o = state.clone_offset(sensor, index)
    keep = np.r_[0:o, o + CLONE_DIM:state.dim]
    out = state.copy()
    out.cov = state.cov[np.ix_(keep, keep)]
    del out.clones(sensor)[index]
    return out


def check_covariance(P, sym_tol=1e-10, psd_tol=-1e-9):
    """True if ``P`` is symmetric and numerically PSD."""
    if np.max(np.abs(P - P.T), initial=0.0) > sym_tol:
        return False
    return bool(np.min(np.linalg.eigvalsh(P), initial=0.0) >= psd_tol)
