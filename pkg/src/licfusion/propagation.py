"""IMU mean and covariance propagation.

Mean: RK4 over each IMU sample interval with linearly interpolated gyro and
accelerometer readings. Transition matrix: the linearized error dynamics
integrated with the same RK4 stages. Discrete noise: trapezoidal rule per
interval.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rotation import normalize, omega_matrix, rot_matrix, skew
from .state import BA, BG, IMU_DIM, POS, THETA, VEL, FullState, ImuState, symmetrize

GRAVITY = np.array([0.0, 0.0, -9.81])


class PropagationError(ValueError):
    pass


@dataclass
class ImuSample:
    t: float
    w: np.ndarray
    a: np.ndarray


@dataclass
class ImuNoiseParams:
    gyro_noise: float = 1.0e-3  # rad/s/sqrt(Hz)
    accel_noise: float = 1.0e-2  # m/s^2/sqrt(Hz)
    gyro_walk: float = 1.0e-5  # rad/s^2/sqrt(Hz)
    accel_walk: float = 1.0e-4  # m/s^3/sqrt(Hz)
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float)
        for name in ("gyro_noise", "accel_noise", "gyro_walk", "accel_walk"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def continuous_cov(self):
        """Continuous-time noise intensity mapped onto the 15-dim error state."""
        d = np.zeros(IMU_DIM)
        d[THETA:THETA + 3] = self.gyro_noise ** 2
        d[BG:BG + 3] = self.gyro_walk ** 2
        d[VEL:VEL + 3] = self.accel_noise ** 2
        d[BA:BA + 3] = self.accel_walk ** 2
        return np.diag(d)


class ImuBuffer:
    """Time-sorted IMU readings stored as arrays."""

    def __init__(self, t, w, a):
        self.t = np.asarray(t, dtype=float)
        self.w = np.asarray(w, dtype=float).reshape(-1, 3)
        self.a = np.asarray(a, dtype=float).reshape(-1, 3)
        if not (len(self.t) == len(self.w) == len(self.a)):
            raise ValueError("IMU arrays have mismatched lengths")
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("IMU timestamps must be strictly increasing")

    @classmethod
    def from_samples(cls, samples):
        return cls([s.t for s in samples], [s.w for s in samples], [s.a for s in samples])

    def __len__(self):
        return len(self.t)

    def samples(self):
        return [ImuSample(float(t), w.copy(), a.copy()) for t, w, a in zip(self.t, self.w, self.a)]

    def interpolate(self, t):
        if len(self.t) == 0 or t < self.t[0] or t > self.t[-1]:
            raise PropagationError(f"time {t} outside IMU span")
        i = int(np.searchsorted(self.t, t, side="right")) - 1
        if i >= len(self.t) - 1:
            return self.w[-1].copy(), self.a[-1].copy()
        s = (t - self.t[i]) / (self.t[i + 1] - self.t[i])
        return ((1 - s) * self.w[i] + s * self.w[i + 1],
                (1 - s) * self.a[i] + s * self.a[i + 1])

    def nodes(self, t0, t1, max_gap=None):
        """Sample times in ``[t0, t1]`` with interpolated readings at both ends."""
        if len(self.t) == 0 or t0 < self.t[0] or t1 > self.t[-1] or t1 < t0:
            raise PropagationError(f"interval [{t0}, {t1}] not covered by IMU samples")
        lo = int(np.searchsorted(self.t, t0, side="right"))
        hi = int(np.searchsorted(self.t, t1, side="left"))
        inner = slice(lo, hi)
        w0, a0 = self.interpolate(t0)
        w1, a1 = self.interpolate(t1)
        ts = np.concatenate(([t0], self.t[inner], [t1]))
        ws = np.vstack((w0, self.w[inner], w1))
        accs = np.vstack((a0, self.a[inner], a1))
        if max_gap is not None:
            # gaps are judged on the raw samples bracketing the interval
            raw = self.t[max(lo - 1, 0):min(hi + 1, len(self.t))]
            if len(raw) > 1 and np.max(np.diff(raw)) > max_gap:
                raise PropagationError(f"IMU gap larger than {max_gap} s near t={t0}")
        return ts, ws, accs


def _error_dynamics(R, wh, ah):
    F = np.zeros((IMU_DIM, IMU_DIM))
    F[THETA:THETA + 3, THETA:THETA + 3] = -skew(wh)
    F[THETA:THETA + 3, BG:BG + 3] = -np.eye(3)
    F[VEL:VEL + 3, THETA:THETA + 3] = -R.T @ skew(ah)
    F[VEL:VEL + 3, BA:BA + 3] = -R.T
    F[POS:POS + 3, VEL:VEL + 3] = np.eye(3)
    return F


def _rk4_interval(q, v, p, bg, ba, w0, a0, w1, a1, h, g, want_phi):
    wm, am = 0.5 * (w0 + w1), 0.5 * (a0 + a1)
    inputs = ((w0 - bg, a0 - ba), (wm - bg, am - ba), (wm - bg, am - ba), (w1 - bg, a1 - ba))
    coef = (0.0, 0.5, 0.5, 1.0)
    kq, kv, kp, kphi = [], [], [], []
    phi = np.eye(IMU_DIM) if want_phi else None
    for (wh, ah), c in zip(inputs, coef):
        if kq:
            qs = q + c * h * kq[-1]
            vs = v + c * h * kv[-1]
        else:
            qs, vs = q, v
        R = rot_matrix(qs)
        kq.append(0.5 * omega_matrix(wh) @ qs)
        kv.append(R.T @ ah + g)
        kp.append(vs)
        if want_phi:
            base = phi if not kphi else phi + c * h * kphi[-1]
            kphi.append(_error_dynamics(R, wh, ah) @ base)
    q_new = normalize(q + h / 6.0 * (kq[0] + 2 * kq[1] + 2 * kq[2] + kq[3]))
    v_new = v + h / 6.0 * (kv[0] + 2 * kv[1] + 2 * kv[2] + kv[3])
    p_new = p + h / 6.0 * (kp[0] + 2 * kp[1] + 2 * kp[2] + kp[3])
    if want_phi:
        phi = phi + h / 6.0 * (kphi[0] + 2 * kphi[1] + 2 * kphi[2] + kphi[3])
    return q_new, v_new, p_new, phi


def integrate(imu: ImuState, buffer: ImuBuffer, t0, t1, noise: ImuNoiseParams,
              with_covariance=True, max_gap=None):
    """Propagate ``imu`` from ``t0`` to ``t1``.

    Returns ``(imu_new, Phi, Qd)``; the matrices are ``None`` when
    ``with_covariance`` is false.
    """
    ts, ws, accs = buffer.nodes(t0, t1, max_gap)
    q, v, p = imu.q.copy(), imu.v.copy(), imu.p.copy()
    Phi = np.eye(IMU_DIM) if with_covariance else None
    Qd = np.zeros((IMU_DIM, IMU_DIM)) if with_covariance else None
    Qc = noise.continuous_cov() if with_covariance else None
    g = noise.gravity
    for k in range(len(ts) - 1):
        h = ts[k + 1] - ts[k]
        if h <= 0.0:
            continue
        q, v, p, phi_k = _rk4_interval(q, v, p, imu.bg, imu.ba, ws[k], accs[k],
                                       ws[k + 1], accs[k + 1], h, g, with_covariance)
        if with_covariance:
            # G Qc G^T is frame independent for isotropic noise
            Qk = 0.5 * h * (phi_k @ Qc @ phi_k.T + Qc)
            Phi = phi_k @ Phi
            Qd = phi_k @ Qd @ phi_k.T + Qk
    out = ImuState(q, imu.bg.copy(), v, imu.ba.copy(), p)
    return out, Phi, Qd


def propagate_mean(imu: ImuState, buffer: ImuBuffer, t0, t_target, gravity=GRAVITY, max_gap=None):
    noise = ImuNoiseParams(0.0, 0.0, 0.0, 0.0, gravity)
    out, _, _ = integrate(imu, buffer, t0, t_target, noise, with_covariance=False, max_gap=max_gap)
    return out


def propagate_with_covariance(state: FullState, buffer: ImuBuffer, noise: ImuNoiseParams,
                              t_target, max_gap=None) -> FullState:
    """Propagate mean and covariance; calibration and clone means are untouched."""
    if t_target < state.t:
        raise PropagationError(f"cannot propagate backwards from {state.t} to {t_target}")
    out = state.copy()
    if t_target == state.t:
        return out
    imu, Phi, Qd = integrate(state.imu, buffer, state.t, t_target, noise, True, max_gap)
    P = state.cov
    n = IMU_DIM
    newP = P.copy()
    newP[:n, :n] = Phi @ P[:n, :n] @ Phi.T + Qd
    newP[:n, n:] = Phi @ P[:n, n:]
    newP[n:, :n] = newP[:n, n:].T
    out.imu = imu
    out.cov = symmetrize(newP)
    out.t = float(t_target)
    return out


def transition_matrix(imu: ImuState, buffer: ImuBuffer, t0, t1, noise: ImuNoiseParams):
    _, Phi, Qd = integrate(imu, buffer, t0, t1, noise, True)
    return Phi, Qd
