"""Point-to-line / point-to-plane residuals, their state Jacobians and gating."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lidar_frontend import Correspondence, FeatureKind
from .rotation import cross, norm, rot_matrix, skew
from .state import CAL_POS, CAL_ROT, CL_POS, CL_ROT, FullState, Sensor
from .update import chi_squared_quantile


class DegenerateAnchors(ValueError):
    pass


@dataclass
class LidarResidual:
    value: float  # reported distance, >= 0
    signed: float  # h(x_hat) used for linearization
    jacobian: np.ndarray  # (D,) row
    noise_var: float
    kind: FeatureKind = FeatureKind.SURF


def edge_residual(pi, pj, pk):
    line = pj - pk
    L = norm(line)
    if L < 1e-6:
        raise DegenerateAnchors("edge anchors coincide")
    return float(norm(cross(pi - pj, pi - pk)) / L)


def surf_residual_signed(pi, pj, pk, pl):
    c = cross(pk - pj, pl - pj)
    nc = norm(c)
    if nc < 1e-9:
        raise DegenerateAnchors("surf anchors are collinear")
    return float((pi - pj) @ c / nc)


def surf_residual(pi, pj, pk, pl):
    return abs(surf_residual_signed(pi, pj, pk, pl))


def edge_gradients(pi, pj, pk):
    """Gradients of the point-to-line distance w.r.t. ``pi, pj, pk``."""
    a = pk - pj
    L = norm(a)
    if L < 1e-6:
        raise DegenerateAnchors("edge anchors coincide")
    u = a / L
    w = pi - pj
    along = w @ u
    d = w - along * u
    r = norm(d)
    if r < 1e-12:
        # the distance has no gradient on the line itself
        return np.zeros(3), np.zeros(3), np.zeros(3)
    dhat = d / r
    s = along / L
    return dhat, -(1.0 - s) * dhat, -s * dhat


def surf_gradients(pi, pj, pk, pl):
    """Gradients of the signed point-to-plane distance w.r.t. ``pi, pj, pk, pl``."""
    a = pk - pj
    b = pl - pj
    c = cross(a, b)
    nc = norm(c)
    if nc < 1e-9:
        raise DegenerateAnchors("surf anchors are collinear")
    n = c / nc
    w = pi - pj
    r = w @ n
    gc = (w - r * n) / nc
    ga = cross(b, gc)
    gb = cross(gc, a)
    return n, -(n + ga + gb), ga, gb


def correspondence_gradients(corr: Correspondence, point=None):
    p = corr.projected if point is None else point
    if corr.kind is FeatureKind.EDGE:
        return edge_gradients(p, corr.anchors[0], corr.anchors[1])
    return surf_gradients(p, corr.anchors[0], corr.anchors[1], corr.anchors[2])


def signed_distance(kind, p, anchors):
    if kind is FeatureKind.EDGE:
        return edge_residual(p, anchors[0], anchors[1])
    return surf_residual_signed(p, anchors[0], anchors[1], anchors[2])


@dataclass
class PairGeometry:
    """Quantities shared by every residual between LiDAR clones ``l`` and ``l1``."""

    R_LI: np.ndarray
    p_LI: np.ndarray
    R_l: np.ndarray
    R_l1: np.ndarray
    dp: np.ndarray  # p_l1 - p_l
    A: np.ndarray  # R_LI R_l
    R_rel: np.ndarray
    t_rel: np.ndarray
    offsets: tuple  # (clone l, clone l1, LiDAR calibration)

    @classmethod
    def of(cls, state: FullState, l: int, l1: int):
        c_l, c_l1 = state.lidar_clones[l], state.lidar_clones[l1]
        R_LI = rot_matrix(state.lidar_calib.q)
        p_LI = state.lidar_calib.p
        R_l, R_l1 = rot_matrix(c_l.q), rot_matrix(c_l1.q)
        A = R_LI @ R_l
        R_rel = A @ (R_LI @ R_l1).T
        dp = c_l1.p - c_l.p
        t_rel = A @ (dp - R_l1.T @ (R_LI.T @ p_LI)) + p_LI
        offs = (state.clone_offset(Sensor.LIDAR, l), state.clone_offset(Sensor.LIDAR, l1),
                state.calib_offset(Sensor.LIDAR))
        return cls(R_LI, p_LI, R_l, R_l1, dp, A, R_rel, t_rel, offs)


def projection_jacobians(state: FullState, l: int, l1: int, p, geom: PairGeometry = None):
    """Partials of the projected point w.r.t. the six involved error blocks.

    Keys: ``theta_l, p_l, theta_l1, p_l1, theta_LI, p_LI``; each 3x3.
    """
    g = geom if geom is not None else PairGeometry.of(state, l, l1)
    in_imu = g.R_LI.T @ (p - g.p_LI)
    X = g.R_l1.T @ in_imu + g.dp
    q = p - g.p_LI
    return {
        "theta_l": g.R_LI @ skew(g.R_l @ X),
        "p_l": -g.A,
        "theta_l1": -g.A @ g.R_l1.T @ skew(in_imu),
        "p_l1": g.A,
        "theta_LI": skew(g.R_rel @ q) - g.R_rel @ skew(q) + skew(g.A @ g.dp),
        "p_LI": np.eye(3) - g.R_rel,
    }


def residual_jacobian(state: FullState, corr: Correspondence, l: int, l1: int,
                      point_sigma=None, geom: PairGeometry = None) -> LidarResidual:
    """Residual, 1 x D Jacobian and (optional) propagated noise for one correspondence.

    ``l`` and ``l1`` index ``state.lidar_clones``; ``corr.source`` lives in
    the frame of clone ``l1`` and the anchors in the frame of clone ``l``.
    """
    g = geom if geom is not None else PairGeometry.of(state, l, l1)
    projected = g.R_rel @ corr.source + g.t_rel
    h = signed_distance(corr.kind, projected, corr.anchors)
    gi = correspondence_gradients(corr, projected)[0]
    parts = projection_jacobians(state, l, l1, corr.source, g)
    H = np.zeros(state.dim)
    ol, ol1, oc = g.offsets
    H[ol + CL_ROT:ol + CL_ROT + 3] = gi @ parts["theta_l"]
    H[ol + CL_POS:ol + CL_POS + 3] = gi @ parts["p_l"]
    H[ol1 + CL_ROT:ol1 + CL_ROT + 3] = gi @ parts["theta_l1"]
    H[ol1 + CL_POS:ol1 + CL_POS + 3] = gi @ parts["p_l1"]
    H[oc + CAL_ROT:oc + CAL_ROT + 3] = gi @ parts["theta_LI"]
    H[oc + CAL_POS:oc + CAL_POS + 3] = gi @ parts["p_LI"]
    var = 0.0
    if point_sigma is not None:
        covs = [point_sigma ** 2 * np.eye(3)] * (1 + len(corr.anchors))
        var = propagate_point_noise(corr, covs, g.R_rel, projected)
    return LidarResidual(abs(h), h, H, var, corr.kind)


def propagate_point_noise(corr: Correspondence, point_covs, rel_rotation=None, projected=None):
    """Variance of the distance from the raw point covariances (first order).

    ``point_covs`` lists the source point covariance (newer frame) followed by
    one covariance per anchor.
    """
    grads = correspondence_gradients(corr, projected)
    R = np.eye(3) if rel_rotation is None else rel_rotation
    jacs = [grads[0] @ R] + list(grads[1:])
    return float(sum(J @ C @ J for J, C in zip(jacs, point_covs)))


def mahalanobis_gate(res: LidarResidual, P, confidence=0.95):
    """Chi-squared (1 dof) test on ``r^2 / (H P H^T + C_r)``."""
    h = res.jacobian
    nz = np.flatnonzero(h)
    s = float(h[nz] @ P[np.ix_(nz, nz)] @ h[nz]) + res.noise_var
    if not np.isfinite(s) or s <= 0.0:
        return False
    return res.value ** 2 / s <= chi_squared_quantile(1, confidence)
