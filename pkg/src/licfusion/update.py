"""Residual stacking, Givens thin-QR measurement compression and the EKF update."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np
import scipy.linalg
from scipy.stats import chi2


class UpdateError(RuntimeError):
    pass


@dataclass
class ResidualBlock:
    r: np.ndarray  # (n,)
    H: np.ndarray  # (n, D)
    noise: np.ndarray  # (n,) per-row variances

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float).reshape(-1)
        self.H = np.asarray(self.H, dtype=float).reshape(len(self.r), -1)
        self.noise = np.broadcast_to(np.asarray(self.noise, dtype=float), self.r.shape).copy()
        if np.any(self.noise <= 0):
            raise ValueError("noise variances must be positive")

    @property
    def rows(self):
        return len(self.r)

    @property
    def dim(self):
        return self.H.shape[1]


def stack_blocks(blocks):
    blocks = list(blocks)
    if not blocks:
        raise ValueError("nothing to stack")
    D = blocks[0].dim
    if any(b.dim != D for b in blocks):
        raise ValueError("blocks have different state dimensions")
    if len(blocks) == 1:
        return blocks[0]
    return ResidualBlock(np.concatenate([b.r for b in blocks]),
                         np.vstack([b.H for b in blocks]),
                         np.concatenate([b.noise for b in blocks]))


def whiten(block: ResidualBlock):
    s = np.sqrt(block.noise)
    return ResidualBlock(block.r / s, block.H / s[:, None], np.ones(block.rows))


@numba.njit(cache=True)
def _givens_triangularize(A, ncols):
    """In-place Givens reduction of the first ``ncols`` columns of ``A``."""
    m = A.shape[0]
    w = A.shape[1]
    for j in range(min(ncols, m)):
        for i in range(m - 1, j, -1):
            b = A[i, j]
            if b == 0.0:
                continue
            a = A[i - 1, j]
            rho = np.hypot(a, b)
            c = a / rho
            s = b / rho
            for k in range(j, w):
                x = A[i - 1, k]
                y = A[i, k]
                A[i - 1, k] = c * x + s * y
                A[i, k] = -s * x + c * y
            A[i, j] = 0.0


def givens_qr(H, r):
    """Thin QR of ``H`` by Givens rotations, applied jointly to ``r``.

    Returns ``(T_H, r_c)`` where ``T_H`` is the upper-triangular factor with
    ``min(rows, D)`` rows and ``r_c = Q_1^T r``.
    """
    m, D = H.shape
    A = np.ascontiguousarray(np.column_stack((H, r)), dtype=np.float64)
    _givens_triangularize(A, D)
    k = min(m, D)
    return A[:k, :D].copy(), A[:k, D].copy()


def qr_compress(block: ResidualBlock) -> ResidualBlock:
    """Whiten, then compress to at most D rows when the block is taller than D."""
    wb = whiten(block)
    if wb.rows <= wb.dim:
        return wb
    T, rc = givens_qr(wb.H, wb.r)
    return ResidualBlock(rc, T, np.ones(len(rc)))


def kalman_correction(P, block: ResidualBlock, compress=True):
    """Error-state correction ``K r`` and Joseph-form posterior covariance."""
    if block.dim != P.shape[0]:
        raise ValueError(f"block dimension {block.dim} != state dimension {P.shape[0]}")
    if compress:
        block = qr_compress(block)
    H, r, Rn = block.H, block.r, block.noise
    PHt = P @ H.T
    S = H @ PHt + np.diag(Rn)
    try:
        cho = scipy.linalg.cho_factor(S)
    except np.linalg.LinAlgError as exc:
        raise UpdateError("innovation covariance is not positive definite") from exc
    K = scipy.linalg.cho_solve(cho, PHt.T).T
    IKH = np.eye(P.shape[0]) - K @ H
    P_new = IKH @ P @ IKH.T + (K * Rn) @ K.T
    return K @ r, 0.5 * (P_new + P_new.T)


def ekf_update(state, block: ResidualBlock, compress=True):
    """EKF correction with Joseph-form covariance; returns a new state."""
    from .state import boxplus

    dx, P_new = kalman_correction(state.cov, block, compress)
    out = boxplus(state, dx)
    out.cov = P_new
    return out


@lru_cache(maxsize=None)
def _quantile(dof, confidence):
    return float(chi2.ppf(confidence, dof))


def chi_squared_quantile(dof, confidence=0.95):
    if int(dof) != dof or dof < 1:
        raise ValueError(f"dof must be a positive integer, got {dof}")
    if not 0.0 < confidence < 1.0:
        raise ValueError(f"confidence must lie in (0, 1), got {confidence}")
    return _quantile(int(dof), float(confidence))


def chi_squared_gate(r, H, P, noise, confidence=0.95):
    """Joint chi-squared test of a residual block against the prior."""
    S = H @ P @ H.T + np.diag(np.broadcast_to(noise, r.shape))
    try:
        m = float(r @ np.linalg.solve(S, r))
    except np.linalg.LinAlgError:
        return False
    return m <= chi_squared_quantile(len(r), confidence)
