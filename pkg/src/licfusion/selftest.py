"""Finite-difference checks of every analytic Jacobian on random configurations."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .cloning import clone_jacobian
from .lidar_frontend import Correspondence, FeatureKind
from .lidar_update import (
    PairGeometry, edge_gradients, edge_residual, projection_jacobians, residual_jacobian, signed_distance,
    surf_gradients, surf_residual_signed,
)
from .propagation import ImuBuffer, ImuNoiseParams, integrate, propagate_mean
from .rotation import rot_matrix, rot_to_quat, rotation_error, so3_exp
from .state import (
    BA, BG, CAL_TD, CLONES_OFFSET, IMU_DIM, POS, THETA, VEL, ClonePose, FullState, ImuState, Sensor,
    SensorExtrinsics, boxplus,
)
from .update import ResidualBlock, kalman_correction
from .vision import FeatureTrack, camera_pose, visual_residual_jacobians

STEP = 1e-6
TOLERANCE = 1e-4
COMPRESSION_TOLERANCE = 1e-8


@dataclass
class CheckResult:
    name: str
    configs: int
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def relative_error(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def central_difference(f, x0_dim, step=STEP):
    """Jacobian of ``f(delta)`` at ``delta = 0`` by central differences."""
    cols = []
    for i in range(x0_dim):
        e = np.zeros(x0_dim)
        e[i] = step
        cols.append((np.asarray(f(e)) - np.asarray(f(-e))) / (2 * step))
    return np.column_stack(cols)


def random_rotation(rng, scale=np.pi):
    return rot_to_quat(so3_exp(rng.uniform(-1, 1, 3) * scale / np.sqrt(3)))


def random_state(rng, n_cam=3, n_lidar=2, t=1.0):
    imu = ImuState(random_rotation(rng), rng.normal(0, 0.01, 3), rng.normal(0, 1, 3),
                   rng.normal(0, 0.1, 3), rng.normal(0, 2, 3))
    cam = SensorExtrinsics(random_rotation(rng), rng.normal(0, 0.1, 3), rng.normal(0, 0.01))
    lid = SensorExtrinsics(random_rotation(rng), rng.normal(0, 0.1, 3), rng.normal(0, 0.01))
    s = FullState.initial(imu, cam, lid, np.eye(CLONES_OFFSET), t)
    for k in range(n_cam):
        s.cam_clones.append(ClonePose(random_rotation(rng), rng.normal(0, 2, 3), t - 0.1 * (n_cam - k), Sensor.CAMERA))
    for k in range(n_lidar):
        s.lidar_clones.append(ClonePose(random_rotation(rng), rng.normal(0, 2, 3), t - 0.1 * (n_lidar - k),
                                        Sensor.LIDAR))
    s.cov = np.eye(s.dim)
    return s


def random_imu_buffer(rng, t0=0.0, duration=0.3, rate=200.0):
    t = t0 + np.arange(int(duration * rate) + 1) / rate
    w = rng.normal(0, 0.5, 3) + rng.normal(0, 0.2, (len(t), 3))
    a = np.array([0.0, 0.0, 9.81]) + rng.normal(0, 1.0, (len(t), 3))
    return ImuBuffer(t, w, a)


def _imu_error(x, ref):
    """15-vector error ``x - ref`` in the filter's convention."""
    e = np.zeros(IMU_DIM)
    e[THETA:THETA + 3] = rotation_error(rot_matrix(x.q), rot_matrix(ref.q))
    e[BG:BG + 3] = x.bg - ref.bg
    e[VEL:VEL + 3] = x.v - ref.v
    e[BA:BA + 3] = x.ba - ref.ba
    e[POS:POS + 3] = x.p - ref.p
    return e


def _perturb_imu(imu, delta):
    s = FullState.initial(imu.copy(), SensorExtrinsics(), SensorExtrinsics(), np.eye(CLONES_OFFSET))
    d = np.zeros(s.dim)
    d[:IMU_DIM] = delta
    return boxplus(s, d).imu


def check_transition(rng, configs=100):
    worst = 0.0
    noise = ImuNoiseParams()
    for _ in range(configs):
        buf = random_imu_buffer(rng)
        t0, t1 = 0.0, float(rng.uniform(0.05, 0.25))
        imu = random_state(rng, 0, 0).imu
        nominal, Phi, _ = integrate(imu, buf, t0, t1, noise)

        def f(d):
            return _imu_error(propagate_mean(_perturb_imu(imu, d), buf, t0, t1, noise.gravity), nominal)
        worst = max(worst, relative_error(Phi, central_difference(f, IMU_DIM)))
    return CheckResult("imu transition", configs, worst)


def _clone_pose_error(q, p, ref_q, ref_p):
    return np.r_[rotation_error(rot_matrix(q), rot_matrix(ref_q)), p - ref_p]


def check_clone(rng, configs=100):
    """Clone Jacobian, including the time-offset column, against propagation in time."""
    worst = 0.0
    noise = ImuNoiseParams()
    for k in range(configs):
        sensor = Sensor.CAMERA if k % 2 == 0 else Sensor.LIDAR
        buf = random_imu_buffer(rng)
        t1 = 0.15
        start = random_state(rng).imu
        imu = propagate_mean(start, buf, 0.0, t1, noise.gravity)
        state = random_state(rng)
        state.imu = imu
        state.t = t1
        w, _ = buf.interpolate(t1)
        J = clone_jacobian(state, sensor, w - imu.bg)
        td = state.calib_offset(sensor) + CAL_TD

        def f(d):
            if d[td]:
                # the clone sits at the corrected time, which moves with the time offset
                moved = propagate_mean(start, buf, 0.0, t1 + d[td], noise.gravity)
            else:
                moved = boxplus(state, d).imu
            return _clone_pose_error(moved.q, moved.p, imu.q, imu.p)
        worst = max(worst, relative_error(J, central_difference(f, state.dim)))
    return CheckResult("clone jacobian (with time offset)", configs, worst)


def _projected(state, l, l1, src):
    g = PairGeometry.of(state, l, l1)
    return g.R_rel @ src + g.t_rel


def check_lidar_partials(rng, configs=100):
    worst = 0.0
    names = ("theta_l", "p_l", "theta_l1", "p_l1", "theta_LI", "p_LI")
    for _ in range(configs):
        state = random_state(rng, 1, 2)
        src = rng.normal(0, 5, 3)
        parts = projection_jacobians(state, 0, 1, src)
        ol, ol1, oc = (state.clone_offset(Sensor.LIDAR, 0), state.clone_offset(Sensor.LIDAR, 1),
                       state.calib_offset(Sensor.LIDAR))
        offsets = (ol, ol + 3, ol1, ol1 + 3, oc, oc + 3)
        base = _projected(state, 0, 1, src)
        for name, o in zip(names, offsets):
            def f(d, o=o):
                full = np.zeros(state.dim)
                full[o:o + 3] = d
                return _projected(boxplus(state, full), 0, 1, src) - base
            worst = max(worst, relative_error(parts[name], central_difference(f, 3)))
    return CheckResult("lidar projection partials", configs, worst)


def check_lidar_residual(rng, configs=100):
    """Full 1 x D LiDAR residual row, edges and surfs alternately."""
    worst = 0.0
    for k in range(configs):
        state = random_state(rng, 1, 2)
        src = rng.normal(0, 5, 3)
        p = _projected(state, 0, 1, src)
        if k % 2 == 0:
            kind = FeatureKind.EDGE
            anchors = p + rng.normal(0, 0.5, (2, 3))
        else:
            kind = FeatureKind.SURF
            anchors = p + rng.normal(0, 0.5, (3, 3))
        corr = Correspondence(kind, src, p, anchors, tuple(range(len(anchors))))
        H = residual_jacobian(state, corr, 0, 1).jacobian

        def f(d):
            return [signed_distance(kind, _projected(boxplus(state, d), 0, 1, src), anchors)]
        worst = max(worst, relative_error(H[None, :], central_difference(f, state.dim)))
    return CheckResult("lidar residual row", configs, worst)


def check_edge_gradients(rng, configs=100):
    worst = 0.0
    for _ in range(configs):
        pts = rng.normal(0, 2, (3, 3))
        g = np.concatenate(edge_gradients(*pts))

        def f(d):
            q = pts + d.reshape(3, 3)
            return [edge_residual(*q)]
        worst = max(worst, relative_error(g[None, :], central_difference(f, 9)))
    return CheckResult("edge distance gradients", configs, worst)


def check_surf_gradients(rng, configs=100):
    worst = 0.0
    for _ in range(configs):
        pts = rng.normal(0, 2, (4, 3))
        g = np.concatenate(surf_gradients(*pts))

        def f(d):
            q = pts + d.reshape(4, 3)
            return [surf_residual_signed(*q)]
        worst = max(worst, relative_error(g[None, :], central_difference(f, 12)))
    return CheckResult("surf distance gradients", configs, worst)


def visual_setup(rng, n_views=4):
    """State with camera clones that all see a common feature in front of them."""
    while True:
        state = random_state(rng, n_views, 1)
        pf = rng.normal(0, 1, 3)
        track = FeatureTrack(1)
        ok = True
        for c in state.cam_clones:
            R_CG, p_GC = camera_pose(c, state.cam_calib)
            # point the camera at the feature from 3-6 m away
            depth = rng.uniform(3, 6)
            p_GC_new = pf - R_CG.T @ np.r_[rng.normal(0, 0.3, 2), depth]
            c.p = p_GC_new - rot_matrix(c.q).T @ (-rot_matrix(state.cam_calib.q).T @ state.cam_calib.p)
            R_CG, p_GC = camera_pose(c, state.cam_calib)
            pc = R_CG @ (pf - p_GC)
            ok &= pc[2] > 1.0
            track.add(c.t, *(pc[:2] / pc[2] + rng.normal(0, 1e-3, 2)))
        if ok:
            return state, pf, track


def check_visual(rng, configs=100):
    worst_x, worst_f = 0.0, 0.0
    for _ in range(configs):
        state, pf, track = visual_setup(rng)
        r, Hx, Hf = visual_residual_jacobians(track, pf, state)

        def fx(d):
            return -visual_residual_jacobians(track, pf, boxplus(state, d))[0]

        def ff(d):
            return -visual_residual_jacobians(track, pf + d, state)[0]
        worst_x = max(worst_x, relative_error(Hx, central_difference(fx, state.dim)))
        worst_f = max(worst_f, relative_error(Hf, central_difference(ff, 3)))
    return [CheckResult("visual H_x", configs, worst_x), CheckResult("visual H_f", configs, worst_f)]


def check_compression(rng, batches=50, max_factor=10):
    """Posterior with Givens compression vs. the uncompressed update on random tall batches."""
    worst = 0.0
    for k in range(batches):
        D = int(rng.integers(5, 40))
        A = rng.normal(size=(D, D))
        P = A @ A.T / D + 1e-3 * np.eye(D)
        rows = int(rng.integers(1, max_factor * D + 1)) if k else max_factor * D
        block = ResidualBlock(rng.normal(size=rows), rng.normal(size=(rows, D)), rng.uniform(0.01, 1.0, rows))
        dx_c, P_c = kalman_correction(P, block, compress=True)
        dx_u, P_u = kalman_correction(P, block, compress=False)
        worst = max(worst, relative_error(dx_c, dx_u), relative_error(P_c, P_u))
    return CheckResult("compressed vs uncompressed posterior", batches, worst, COMPRESSION_TOLERANCE)


def run_jacobian_suite(seed=0, configs=100):
    """All finite-difference checks; returns ``(results, seconds)``."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    results = [
        check_transition(rng, configs),
        check_clone(rng, configs),
        check_lidar_partials(rng, configs),
        check_lidar_residual(rng, configs),
        check_edge_gradients(rng, configs),
        check_surf_gradients(rng, configs),
        *check_visual(rng, configs),
    ]
    return results, time.perf_counter() - t0
