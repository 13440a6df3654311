"""Simulation experiments shared by the acceptance tests, scripts and CLI."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .estimator import (
    Estimator, EstimatorConfig, EstimatorResult, ExtrinsicsGuess, PriorConfig, run_estimator, split_records,
)
from .lidar_update import correspondence_gradients, mahalanobis_gate, residual_jacobian, signed_distance
from .metrics import Trajectory, compute_metrics
from .propagation import ImuNoiseParams
from .rotation import quat_error, rot_matrix, rot_to_quat, so3_exp
from .sim import SimConfig, SimResult, TrajectoryConfig, lidar_pose, simulate, trajectory_at
from .state import CAL_POS, CAL_ROT, CAL_TD, CAM_CALIB_OFFSET, CLONES_OFFSET, SensorExtrinsics


def default_sim_config(duration=61.0, noise_free=False, **overrides) -> SimConfig:
    traj = TrajectoryConfig(duration=duration)
    return SimConfig(duration=duration, noise_free=noise_free, trajectory=traj, **overrides)


def make_estimator_config(sim_config: SimConfig, use_camera=True, use_lidar=True, noise_free=False,
                          init_mode="truth") -> EstimatorConfig:
    """Estimator settings matched to a simulation; extrinsic guesses are the true values.

    ``noise_free`` swaps in small sensor and process noise so that the filter
    trusts clean measurements; zero would make the innovation covariance singular.
    """
    cfg = EstimatorConfig(use_camera=use_camera, use_lidar=use_lidar)
    cfg.init.mode = init_mode
    cfg.init.cam = ExtrinsicsGuess.from_extrinsics(sim_config.rig.cam)
    cfg.init.lidar = ExtrinsicsGuess.from_extrinsics(sim_config.rig.lidar)
    cfg.imu = dataclasses.replace(sim_config.rig.noise)
    cfg.lidar.point_sigma = sim_config.lidar_sigma
    cfg.camera.pixel_sigma = sim_config.pixel_noise
    cfg.camera.intrinsics = sim_config.camera
    if noise_free:
        cfg.init.prior = PriorConfig(1e-4, 1e-5, 1e-4, 1e-4, 1e-4, 0.01, 1e-4, 1e-4)
        cfg.lidar.point_sigma = 1e-3
        cfg.camera.pixel_sigma = 0.05
        cfg.imu = ImuNoiseParams(1e-5, 1e-4, 1e-7, 1e-6)
    return cfg


def perturb_extrinsics(e: SensorExtrinsics, rot_deg, trans, td, rng) -> SensorExtrinsics:
    """Offset an extrinsic by exact magnitudes along random directions."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    shift = rng.normal(size=3)
    shift /= np.linalg.norm(shift)
    R = so3_exp(np.radians(rot_deg) * axis) @ rot_matrix(e.q)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    return SensorExtrinsics(rot_to_quat(R), e.p + trans * shift, e.td + sign * td)


def sample_initial_error(prior: PriorConfig, rng):
    """Error-state draw from the prior, excluding the calibration blocks."""
    d = rng.multivariate_normal(np.zeros(CLONES_OFFSET), prior.covariance())
    d[CAM_CALIB_OFFSET:CLONES_OFFSET] = 0.0
    return d


@dataclass
class TrialResult:
    seed: int
    sim: SimResult
    result: EstimatorResult
    ate: float
    final_position_error: float
    final_rotation_error_deg: float
    mean_nees: float


def _final_errors(sim: SimResult, res: EstimatorResult):
    q, p, *_ = sim.truth.at(res.t[-1])
    return float(np.linalg.norm(p - res.p[-1])), float(np.degrees(np.linalg.norm(quat_error(q, res.q[-1]))))


def truth_trajectory(sim: SimResult) -> Trajectory:
    return Trajectory(sim.truth.t, sim.truth.p, sim.truth.loop)


def run_trial(seed, sim_config: SimConfig = None, estimator_config: EstimatorConfig = None,
              init_error=None, sim: SimResult = None) -> TrialResult:
    sim_config = sim_config if sim_config is not None else default_sim_config()
    sim = sim if sim is not None else simulate(sim_config, seed)
    cfg = estimator_config if estimator_config is not None else make_estimator_config(sim_config)
    res = run_estimator(cfg, sim.records, sim.truth, init_error)
    m = compute_metrics(Trajectory(res.t, res.p), truth_trajectory(sim))
    pe, re = _final_errors(sim, res)
    return TrialResult(seed, sim, res, m.ate, pe, re, float(np.nanmean(res.nees)))


def noise_free_run(duration=61.0, seed=0) -> TrialResult:
    sc = default_sim_config(duration, noise_free=True)
    return run_trial(seed, sc, make_estimator_config(sc, noise_free=True))


@dataclass
class CalibrationOutcome:
    sensor: str
    rot_error_deg: float
    pos_error: float
    td_error: float
    rot_covered: bool
    pos_covered: bool
    td_covered: bool
    initial: tuple  # injected (deg, m, s)


def calibration_errors(res: EstimatorResult, rig, sensor, index=-1):
    """Final calibration errors and 3-sigma coverage for one sensor chain."""
    true = rig.cam if sensor == "cam" else rig.lidar
    c = res.calib[sensor]
    q, p, td, sig = c["q"][index], c["p"][index], c["td"][index], c["sigma"][index]
    dth = quat_error(true.q, q)
    dp = true.p - p
    dtd = true.td - td
    return CalibrationOutcome(
        sensor,
        float(np.degrees(np.linalg.norm(dth))),
        float(np.linalg.norm(dp)),
        float(abs(dtd)),
        bool(np.all(np.abs(dth) <= 3 * sig[CAL_ROT:CAL_ROT + 3])),
        bool(np.all(np.abs(dp) <= 3 * sig[CAL_POS:CAL_POS + 3])),
        bool(abs(dtd) <= 3 * sig[CAL_TD]),
        (),
    )


def calibration_run(seed=0, duration=61.0, rot_deg=2.0, trans=0.05, td=0.005):
    """Noisy run with both extrinsic guesses offset by the given magnitudes."""
    sc = default_sim_config(duration)
    cfg = make_estimator_config(sc)
    rng = np.random.default_rng(seed + 1000)
    cfg.init.cam = ExtrinsicsGuess.from_extrinsics(perturb_extrinsics(sc.rig.cam, rot_deg, trans, td, rng))
    cfg.init.lidar = ExtrinsicsGuess.from_extrinsics(perturb_extrinsics(sc.rig.lidar, rot_deg, trans, td, rng))
    trial = run_trial(seed, sc, cfg)
    out = []
    for s in ("cam", "lidar"):
        o = calibration_errors(trial.result, sc.rig, s)
        out.append(dataclasses.replace(o, initial=(rot_deg, trans, td)))
    return trial, out


def nees_interval(dof=6, runs=20, confidence=0.95):
    """Two-sided interval of the run-averaged NEES under consistency."""
    from scipy.stats import chi2

    a = (1.0 - confidence) / 2.0
    k = dof * runs
    return chi2.ppf(a, k) / runs, chi2.ppf(1.0 - a, k) / runs


def mc_nees(seeds, duration=30.0):
    """Run-averaged pose NEES over time, with the initial state drawn from the prior."""
    sc = default_sim_config(duration)
    series = []
    times = None
    for s in seeds:
        cfg = make_estimator_config(sc)
        err = sample_initial_error(cfg.init.prior, np.random.default_rng(10_000 + s))
        trial = run_trial(s, sc, cfg, init_error=err)
        series.append(trial.result.nees)
        times = trial.result.t if times is None else times
    n = min(len(x) for x in series)
    avg = np.mean([x[:n] for x in series], axis=0)
    return times[:n], avg


def fusion_trend(seeds, duration=30.0):
    """Mean ATE of LiDAR+camera, camera-only and LiDAR-only runs on shared simulations."""
    sc = default_sim_config(duration)
    ates = {"lic": [], "camera": [], "lidar": []}
    modes = {"lic": (True, True), "camera": (True, False), "lidar": (False, True)}
    for s in seeds:
        sim = simulate(sc, s)
        for name, (cam, lid) in modes.items():
            trial = run_trial(s, sc, make_estimator_config(sc, cam, lid), sim=sim)
            ates[name].append(trial.ate)
    return {k: float(np.mean(v)) for k, v in ates.items()}, ates


@dataclass
class GateStatistics:
    inliers: int = 0
    inliers_accepted: int = 0
    outliers: int = 0
    outliers_rejected: int = 0
    mismatched: int = 0  # associations that are wrong under the true poses

    @property
    def acceptance(self):
        return self.inliers_accepted / max(self.inliers, 1)

    @property
    def rejection(self):
        return self.outliers_rejected / max(self.outliers, 1)


def _true_lidar_pose(t_imu, sc: SimConfig):
    tp = trajectory_at(t_imu, sc.trajectory)
    return lidar_pose(tp.q, tp.p, sc.rig.lidar)


def _true_distance(corr, clone_l, clone_l1, sc):
    """Point-to-feature distance of the measured points placed with the true LiDAR poses."""
    R_l, o_l = _true_lidar_pose(clone_l.t, sc)
    R_l1, o_l1 = _true_lidar_pose(clone_l1.t, sc)
    src = R_l @ (R_l1.T @ corr.source + o_l1 - o_l)
    return abs(signed_distance(corr.kind, src, corr.anchors))


def _displaced(corr, res_geom, distance):
    """Copy of ``corr`` with the source moved ``distance`` further from its feature."""
    g = correspondence_gradients(corr, corr.projected)[0]
    g = g / max(np.linalg.norm(g), 1e-12)
    step = np.sign(signed_distance(corr.kind, corr.projected, corr.anchors)) or 1.0
    source = corr.source + distance * step * (res_geom.R_rel.T @ g)
    projected = res_geom.R_rel @ source + res_geom.t_rel
    return dataclasses.replace(corr, source=source, projected=projected)


def gate_statistics(seeds, duration=20.0, outlier_distance=1.0, inlier_sigmas=5.0, confidence=0.95):
    """Gate decisions on simulated LiDAR residuals and on copies displaced by ``outlier_distance``.

    A residual counts as an inlier when its distance under the true poses is
    within ``inlier_sigmas`` of its propagated measurement noise; the rest are
    wrong associations and are left out of both rates.
    """
    sc = default_sim_config(duration)
    stats = GateStatistics()

    def probe(est, res, corr, geom):
        st = est.state
        c_l, c_l1 = st.lidar_clones[-2], st.lidar_clones[-1]
        if _true_distance(corr, c_l, c_l1, sc) > inlier_sigmas * np.sqrt(res.noise_var):
            stats.mismatched += 1
            return
        stats.inliers += 1
        stats.inliers_accepted += bool(mahalanobis_gate(res, st.cov, confidence))
        bad = residual_jacobian(st, _displaced(corr, geom, outlier_distance), len(st.lidar_clones) - 2,
                                len(st.lidar_clones) - 1, geom=geom)
        bad.noise_var = res.noise_var
        stats.outliers += 1
        stats.outliers_rejected += not mahalanobis_gate(bad, st.cov, confidence)

    for s in seeds:
        sim = simulate(sc, s)
        cfg = make_estimator_config(sc)
        cfg.gate_confidence = confidence
        buf, lidar, cam = split_records(sim.records)
        est = Estimator(cfg, buf, sim.truth)
        est.gate_probe = probe
        est.run(lidar, cam)
    return stats
