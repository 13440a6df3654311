"""Clock correction and stochastic cloning of the IMU pose."""

from __future__ import annotations

import numpy as np

from .state import (
    CAL_TD, CLONE_DIM, CLONES_OFFSET, POS, THETA, ClonePose, FullState, Sensor, StateError,
    symmetrize,
)


def corrected_imu_time(t_sensor, offset):
    """Measurement time in the IMU clock: ``t_I = t_sensor + t_d``."""
    return t_sensor + offset


def clone_jacobian(state: FullState, sensor: Sensor, omega_hat):
    """6 x D Jacobian of the new clone error w.r.t. the current error state.

    Identity on the IMU orientation/position and ``[omega_hat; v_hat]`` on the
    time offset of the sensor that triggered the clone; zero elsewhere.
    """
    J = np.zeros((CLONE_DIM, state.dim))
    J[0:3, THETA:THETA + 3] = np.eye(3)
    J[3:6, POS:POS + 3] = np.eye(3)
    td = state.calib_offset(sensor) + CAL_TD
    J[0:3, td] = omega_hat
    J[3:6, td] = state.imu.v
    return J


def augment_clone(state: FullState, sensor: Sensor, omega_hat, t_imu, max_clones=None) -> FullState:
    """Append a clone of the current IMU pose and grow the covariance by 6."""
    clones = state.clones(sensor)
    if max_clones is not None and len(clones) >= max_clones:
        raise StateError(f"{sensor.value} window full ({max_clones}); marginalize first")
    if clones and t_imu <= clones[-1].t:
        raise StateError(f"clone time {t_imu} not after previous clone {clones[-1].t}")
    J = clone_jacobian(state, sensor, np.asarray(omega_hat, dtype=float))
    P = state.cov
    PJt = P @ J.T
    D = state.dim
    # new block goes at the end of its window
    pos = CLONES_OFFSET + CLONE_DIM * len(state.cam_clones)
    if sensor is Sensor.LIDAR:
        pos += CLONE_DIM * len(state.lidar_clones)
    old = np.r_[0:pos, pos + CLONE_DIM:D + CLONE_DIM]
    new = np.arange(pos, pos + CLONE_DIM)
    P_new = np.zeros((D + CLONE_DIM, D + CLONE_DIM))
    P_new[np.ix_(old, old)] = P
    P_new[np.ix_(old, new)] = PJt
    P_new[np.ix_(new, old)] = PJt.T
    P_new[np.ix_(new, new)] = J @ PJt
    out = state.copy()
    out.cov = symmetrize(P_new)
    out.clones(sensor).append(ClonePose(state.imu.q.copy(), state.imu.p.copy(), float(t_imu), sensor))
    return out
