"""Trajectory alignment and error metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass
class Trajectory:
    t: np.ndarray  # (N,)
    p: np.ndarray  # (N, 3)
    loop: bool = False

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.p = np.asarray(self.p, dtype=float).reshape(-1, 3)
        if len(self.t) != len(self.p):
            raise MetricsError("trajectory times and positions differ in length")


@dataclass
class Metrics:
    ate: float
    mse_t: np.ndarray  # association times
    mse: np.ndarray  # squared position error per associated pair
    start_end: float | None
    rotation: np.ndarray
    translation: np.ndarray


def associate(t_est, t_gt, max_dt=0.01):
    """Nearest-neighbour association of each estimate time to a truth time.

    Returns ``(i_est, i_gt)`` index arrays of the pairs closer than ``max_dt``.
    """
    t_est = np.asarray(t_est, dtype=float)
    t_gt = np.asarray(t_gt, dtype=float)
    if len(t_est) == 0 or len(t_gt) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    order = np.argsort(t_gt, kind="stable")
    ts = t_gt[order]
    j = np.clip(np.searchsorted(ts, t_est), 1, max(len(ts) - 1, 1))
    lo = np.clip(j - 1, 0, len(ts) - 1)
    hi = np.clip(j, 0, len(ts) - 1)
    pick = np.where(np.abs(ts[lo] - t_est) <= np.abs(ts[hi] - t_est), lo, hi)
    keep = np.abs(ts[pick] - t_est) <= max_dt
    return np.flatnonzero(keep), order[pick[keep]]


def align_trajectories(est_p, gt_p):
    """Least-squares rigid ``(R, t)`` with ``gt ~ R est + t`` (no scale).

    So if ``est = R0 gt + t0`` the result is ``(R0^T, -R0^T t0)``.
    """
    est_p = np.asarray(est_p, dtype=float).reshape(-1, 3)
    gt_p = np.asarray(gt_p, dtype=float).reshape(-1, 3)
    if len(est_p) != len(gt_p):
        raise MetricsError("alignment needs paired positions")
    if len(est_p) < 3:
        raise MetricsError(f"alignment needs at least 3 pairs, got {len(est_p)}")
    mu_e = est_p.mean(axis=0)
    mu_g = gt_p.mean(axis=0)
    S = (gt_p - mu_g).T @ (est_p - mu_e)
    U, _, Vt = np.linalg.svd(S)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    return R, mu_g - R @ mu_e


def compute_metrics(est: Trajectory, gt: Trajectory, aligned=True, max_dt=0.01) -> Metrics:
    """ATE (RMS position error), squared error per time, and start-end error on loops."""
    ie, ig = associate(est.t, gt.t, max_dt)
    if len(ie) == 0:
        raise MetricsError("estimate and truth have no temporal overlap")
    pe, pg = est.p[ie], gt.p[ig]
    if aligned:
        R, t = align_trajectories(pe, pg)
    else:
        R, t = np.eye(3), np.zeros(3)
    err = pe @ R.T + t - pg
    sq = np.einsum("ij,ij->i", err, err)
    start_end = float(np.linalg.norm(est.p[0] - est.p[-1])) if gt.loop else None
    return Metrics(float(np.sqrt(sq.mean())), est.t[ie], sq, start_end, R, t)
