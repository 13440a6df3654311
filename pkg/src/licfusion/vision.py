"""Visual feature triangulation, reprojection Jacobians and MSCKF nullspace projection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .rotation import rot_matrix, skew
from .state import CAL_POS, CAL_ROT, CL_POS, CL_ROT, FullState, Sensor


class TriangulationError(ValueError):
    pass


class IllConditioned(TriangulationError):
    pass


class BehindCamera(TriangulationError):
    pass


class RankDeficient(ValueError):
    pass


@dataclass
class FeatureTrack:
    id: int
    observations: list = field(default_factory=list)  # (clone_t, u, v) normalized coords

    def add(self, t, u, v):
        self.observations.append((float(t), float(u), float(v)))

    def __len__(self):
        return len(self.observations)


@dataclass
class CameraModel:
    fx: float = 400.0
    fy: float = 400.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def to_pixels(self, uv):
        uv = np.asarray(uv, dtype=float)
        return np.stack([self.fx * uv[..., 0] + self.cx, self.fy * uv[..., 1] + self.cy], axis=-1)

    def in_image(self, px):
        px = np.asarray(px)
        return ((px[..., 0] >= 0) & (px[..., 0] < self.width)
                & (px[..., 1] >= 0) & (px[..., 1] < self.height))

    def normalized_sigma(self, pixel_sigma):
        return pixel_sigma / np.sqrt(self.fx * self.fy)


def camera_pose(clone, calib):
    """``(R_CG, p_GC)``: global-to-camera rotation and camera position in global."""
    R_CI = rot_matrix(calib.q)
    R_IG = rot_matrix(clone.q)
    p_IC = -R_CI.T @ calib.p
    return R_CI @ R_IG, clone.p + R_IG.T @ p_IC


def _clone_lookup(state: FullState):
    return {c.t: i for i, c in enumerate(state.cam_clones)}


def _track_views(track, state):
    lookup = _clone_lookup(state)
    views = []
    for t, u, v in track.observations:
        i = lookup.get(t)
        if i is None:
            raise KeyError(f"observation at t={t} has no camera clone")
        views.append((i, np.array([u, v])))
    return views


def _project(R_CG, p_GC, pf):
    pc = R_CG @ (pf - p_GC)
    return pc[:2] / pc[2], pc


def _proj_jacobian(pc):
    x, y, z = pc
    return np.array([[1.0 / z, 0.0, -x / z ** 2], [0.0, 1.0 / z, -y / z ** 2]])


def triangulate(track: FeatureTrack, state: FullState, min_parallax_deg=0.5,
                iterations=5, return_history=False):
    """Global feature position from its bearings in the camera clones.

    Linear least-squares ray intersection followed by up to ``iterations``
    Gauss-Newton steps on the reprojection error.
    """
    views = _track_views(track, state)
    if len(views) < 2:
        raise IllConditioned("need at least two observations")
    poses = [camera_pose(state.cam_clones[i], state.cam_calib) for i, _ in views]
    bearings = []
    for (R_CG, _), (_, z) in zip(poses, views):
        b = R_CG.T @ np.array([z[0], z[1], 1.0])
        bearings.append(b / np.linalg.norm(b))
    B = np.array(bearings)
    cosines = np.clip(B @ B.T, -1.0, 1.0)
    if np.degrees(np.arccos(cosines.min())) < min_parallax_deg:
        raise IllConditioned("parallax below threshold")
    A = np.zeros((3, 3))
    rhs = np.zeros(3)
    for (_, o), b in zip(poses, bearings):
        M = np.eye(3) - np.outer(b, b)
        A += M
        rhs += M @ o
    if np.linalg.cond(A) > 1e12:
        raise IllConditioned("ray intersection is singular")
    pf = np.linalg.solve(A, rhs)

    def cost(p):
        out = []
        for (R_CG, o), (_, z) in zip(poses, views):
            zh, _ = _project(R_CG, o, p)
            out.append(z - zh)
        return np.concatenate(out)

    history = [float(np.sqrt(np.mean(cost(pf) ** 2)))]
    for _ in range(iterations):
        J = []
        res = []
        for (R_CG, o), (_, z) in zip(poses, views):
            zh, pc = _project(R_CG, o, pf)
            if pc[2] <= 0:
                raise BehindCamera("feature behind a camera during refinement")
            J.append(_proj_jacobian(pc) @ R_CG)
            res.append(z - zh)
        J, res = np.vstack(J), np.concatenate(res)
        step = np.linalg.lstsq(J, res, rcond=None)[0]
        candidate = pf + step
        new_rms = float(np.sqrt(np.mean(cost(candidate) ** 2)))
        if new_rms > history[-1]:
            break
        pf = candidate
        history.append(new_rms)
        if np.linalg.norm(step) < 1e-12 * (1.0 + np.linalg.norm(pf)):
            break
    for R_CG, o in poses:
        if (R_CG @ (pf - o))[2] <= 0:
            raise BehindCamera("feature has negative depth")
    return (pf, history) if return_history else pf


def visual_residual_jacobians(track: FeatureTrack, pf, state: FullState):
    """Stacked reprojection residual ``z - h`` with ``H_x`` (2k x D) and ``H_f`` (2k x 3)."""
    views = _track_views(track, state)
    k = len(views)
    r = np.zeros(2 * k)
    Hx = np.zeros((2 * k, state.dim))
    Hf = np.zeros((2 * k, 3))
    R_CI = rot_matrix(state.cam_calib.q)
    oc = state.calib_offset(Sensor.CAMERA)
    for row, (i, z) in enumerate(views):
        clone = state.cam_clones[i]
        R_IG = rot_matrix(clone.q)
        d_I = R_IG @ (pf - clone.p)
        pc = R_CI @ d_I + state.cam_calib.p
        Jp = _proj_jacobian(pc)
        rs = slice(2 * row, 2 * row + 2)
        r[rs] = z - pc[:2] / pc[2]
        o = state.clone_offset(Sensor.CAMERA, i)
        Hx[rs, o + CL_ROT:o + CL_ROT + 3] = Jp @ R_CI @ skew(d_I)
        Hx[rs, o + CL_POS:o + CL_POS + 3] = -Jp @ R_CI @ R_IG
        Hx[rs, oc + CAL_ROT:oc + CAL_ROT + 3] = Jp @ skew(R_CI @ d_I)
        Hx[rs, oc + CAL_POS:oc + CAL_POS + 3] = Jp
        Hf[rs] = Jp @ R_CI @ R_IG
    return r, Hx, Hf


def nullspace_project(r, Hx, Hf, rank_tol=1e-9):
    """Remove the feature from the linearized residual via the left nullspace of ``Hf``."""
    if Hf.shape[0] <= 3:
        raise RankDeficient("not enough rows to project out the feature")
    Q, R, _ = scipy.linalg.qr(Hf, pivoting=True)
    diag = np.abs(np.diag(R))
    if diag[-1] <= rank_tol * max(diag[0], 1e-300):
        raise RankDeficient("feature Jacobian has rank < 3")
    N = Q[:, 3:]
    return N.T @ r, N.T @ Hx
