"""Filter orchestration: initialization, per-record propagate / clone / update, history."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cloning import augment_clone, corrected_imu_time
from .lidar_frontend import (
    ExtractionConfig, FeatureIndex, FeatureKind, LidarScan, NoCorrespondence, extract_features,
    find_correspondence, scan_curvatures,
)
from .lidar_update import (
    DegenerateAnchors, PairGeometry, mahalanobis_gate, propagate_point_noise, residual_jacobian,
)
from .propagation import ImuBuffer, ImuNoiseParams, propagate_with_covariance
from .rotation import normalize, quat_error, rot_to_quat
from .state import (
    BA, BG, CAL_POS, CAL_ROT, CAL_TD, CALIB_DIM, CAM_CALIB_OFFSET, CLONES_OFFSET,
    LIDAR_CALIB_OFFSET, POS, THETA, VEL, FullState, ImuState, Sensor, SensorExtrinsics,
    boxplus, marginalize_clone,
)
from .update import ResidualBlock, UpdateError, chi_squared_gate, ekf_update, stack_blocks
from .vision import (
    CameraModel, FeatureTrack, RankDeficient, TriangulationError, nullspace_project, triangulate,
    visual_residual_jacobians,
)

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


class InitializationError(RuntimeError):
    pass


# ---------------------------------------------------------------- configuration


@dataclass
class ExtrinsicsGuess:
    q: tuple = (0.0, 0.0, 0.0, 1.0)
    p: tuple = (0.0, 0.0, 0.0)
    td: float = 0.0

    def to_extrinsics(self):
        return SensorExtrinsics(normalize(np.array(self.q, dtype=float)), np.array(self.p, dtype=float),
                                float(self.td))

    @classmethod
    def from_extrinsics(cls, e: SensorExtrinsics):
        return cls(tuple(float(x) for x in e.q), tuple(float(x) for x in e.p), float(e.td))


@dataclass
class PriorConfig:
    theta_sigma: float = 0.005  # rad
    bg_sigma: float = 0.005
    v_sigma: float = 0.01
    ba_sigma: float = 0.05
    p_sigma: float = 0.01
    calib_rot_sigma_deg: float = 2.0
    calib_pos_sigma: float = 0.05
    calib_td_sigma: float = 0.01

    def covariance(self):
        d = np.zeros(CLONES_OFFSET)
        d[THETA:THETA + 3] = self.theta_sigma ** 2
        d[BG:BG + 3] = self.bg_sigma ** 2
        d[VEL:VEL + 3] = self.v_sigma ** 2
        d[BA:BA + 3] = self.ba_sigma ** 2
        d[POS:POS + 3] = self.p_sigma ** 2
        for o in (CAM_CALIB_OFFSET, LIDAR_CALIB_OFFSET):
            d[o + CAL_ROT:o + CAL_ROT + 3] = np.radians(self.calib_rot_sigma_deg) ** 2
            d[o + CAL_POS:o + CAL_POS + 3] = self.calib_pos_sigma ** 2
            d[o + CAL_TD] = self.calib_td_sigma ** 2
        return np.diag(d)


@dataclass
class InitConfig:
    mode: str = "static"  # "static": gravity-aligned from a still window; "truth": from ground truth
    static_window: float = 1.0
    prior: PriorConfig = field(default_factory=PriorConfig)
    cam: ExtrinsicsGuess = field(default_factory=ExtrinsicsGuess)
    lidar: ExtrinsicsGuess = field(default_factory=ExtrinsicsGuess)


@dataclass
class LidarConfig:
    point_sigma: float = 0.02
    use_edges: bool = True
    use_surf: bool = True
    max_sources: int = 40  # per feature kind and scan
    max_correspondence_distance: float = 1.0
    # the edge residual is a norm whose direction follows the noise, doubling its second moment
    edge_variance_scale: float = 2.0
    # azimuth quantization of edge locations, added as point noise (0 disables)
    azimuth_resolution_deg: float = 1.0
    unique_anchors: bool = True
    # a surf point's ring direction must lie in the anchor plane: |n . d| below this
    max_plane_tangent_cos: float = 0.3
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)  # source features
    # denser selection from the previous scan that correspondences are searched in
    anchor_extraction: ExtractionConfig = field(
        default_factory=lambda: ExtractionConfig(max_edge_per_sector=6, max_surf_per_sector=30, suppression=1))


@dataclass
class CameraConfig:
    pixel_sigma: float = 1.0
    min_track_length: int = 3
    min_parallax_deg: float = 0.5
    gate: bool = True
    intrinsics: CameraModel = field(default_factory=CameraModel)


@dataclass
class EstimatorConfig:
    """Filter settings; every field has a usable default."""

    m: int = 8  # camera clone window
    n: int = 2  # LiDAR clone window
    use_camera: bool = True
    use_lidar: bool = True
    imu: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    gate_confidence: float = 0.95
    max_imu_gap: float = 0.05
    divergence_trace: float = 1.0e3  # abort when trace of the position covariance exceeds this (m^2)
    lidar: LidarConfig = field(default_factory=LidarConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    init: InitConfig = field(default_factory=InitConfig)

    def __post_init__(self):
        if self.m < 2 or self.n < 2:
            raise ValueError("clone windows need m >= 2 and n >= 2")
        if not 0.0 < self.gate_confidence < 1.0:
            raise ValueError("gate_confidence must lie in (0, 1)")


# ---------------------------------------------------------------- results


@dataclass
class Diagnostics:
    steps: int = 0
    lidar_scans: int = 0
    camera_frames: int = 0
    lidar_accepted: int = 0
    lidar_rejected: int = 0
    lidar_unmatched: int = 0
    tracks_used: int = 0
    tracks_rejected: int = 0
    tracks_failed: int = 0
    update_failures: int = 0
    skipped_records: int = 0


@dataclass
class EstimatorResult:
    t: np.ndarray
    q: np.ndarray
    p: np.ndarray
    v: np.ndarray
    bg: np.ndarray
    ba: np.ndarray
    pose_sigma: np.ndarray  # (N, 6): orientation then position
    calib: dict  # sensor value -> dict of q, p, td, sigma arrays
    nees: np.ndarray  # NaN where truth is unavailable
    sensor: list  # which record produced each entry
    diagnostics: Diagnostics
    final_state: FullState = None

    def __len__(self):
        return len(self.t)


class _History:
    def __init__(self):
        self.rows = []

    def append(self, state: FullState, sensor, nees):
        P = state.cov
        d = np.sqrt(np.clip(np.diag(P), 0.0, None))
        calib = {}
        for s in (Sensor.CAMERA, Sensor.LIDAR):
            c = state.calib(s)
            o = state.calib_offset(s)
            calib[s.value] = (c.q.copy(), c.p.copy(), c.td, d[o:o + CALIB_DIM].copy())
        imu = state.imu
        self.rows.append((state.t, imu.q.copy(), imu.p.copy(), imu.v.copy(), imu.bg.copy(), imu.ba.copy(),
                          np.r_[d[THETA:THETA + 3], d[POS:POS + 3]], calib, nees, sensor))

    def result(self, diagnostics, state):
        rows = self.rows
        if not rows:
            z3, z4 = np.zeros((0, 3)), np.zeros((0, 4))
            empty = {s.value: {"q": z4, "p": z3, "td": np.zeros(0), "sigma": np.zeros((0, CALIB_DIM))}
                     for s in (Sensor.CAMERA, Sensor.LIDAR)}
            return EstimatorResult(np.zeros(0), z4, z3, z3, z3, z3, np.zeros((0, 6)), empty, np.zeros(0),
                                   [], diagnostics, state)
        cols = list(zip(*rows))
        calib = {}
        for s in (Sensor.CAMERA, Sensor.LIDAR):
            entries = [c[s.value] for c in cols[7]]
            calib[s.value] = {
                "q": np.array([e[0] for e in entries]),
                "p": np.array([e[1] for e in entries]),
                "td": np.array([e[2] for e in entries]),
                "sigma": np.array([e[3] for e in entries]),
            }
        return EstimatorResult(np.array(cols[0]), np.array(cols[1]), np.array(cols[2]), np.array(cols[3]),
                               np.array(cols[4]), np.array(cols[5]), np.array(cols[6]), calib,
                               np.array(cols[8], dtype=float), list(cols[9]), diagnostics, state)


# ---------------------------------------------------------------- helpers


def gravity_aligned_orientation(accel_mean):
    """``^I_G q`` with the measured specific force along global +z and zero yaw."""
    z = np.asarray(accel_mean, dtype=float)
    nz = np.linalg.norm(z)
    if nz < 1e-6:
        raise InitializationError("accelerometer mean is zero; cannot align gravity")
    z = z / nz
    e = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = e - (e @ z) * z
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R_IG = np.column_stack((x, y, z))  # columns are the global axes in the IMU frame
    return rot_to_quat(R_IG)


def pose_nees(state: FullState, q_true, p_true):
    """Normalized error squared of the IMU orientation and position."""
    e = np.r_[quat_error(q_true, state.imu.q), p_true - state.imu.p]
    idx = np.r_[THETA:THETA + 3, POS:POS + 3]
    P = state.cov[np.ix_(idx, idx)]
    return float(e @ np.linalg.solve(P, e))


def _spread(items, k):
    """Up to ``k`` items picked at evenly spaced positions (deterministic)."""
    if len(items) <= k:
        return list(items)
    picks = np.unique(np.round(np.linspace(0, len(items) - 1, k)).astype(int))
    return [items[i] for i in picks]


# ---------------------------------------------------------------- estimator


class Estimator:
    """Single-threaded filter over an offline sensor log.

    All records are consumed in order of their IMU-clock time, which uses the
    current time-offset estimates of each sensor.
    """

    def __init__(self, config: EstimatorConfig, imu: ImuBuffer, truth=None, init_error=None):
        self.cfg = config
        self.imu = imu
        self.truth = truth
        self.diag = Diagnostics()
        self.history = _History()
        self.tracks = {}
        self.prev_index = None
        # optional callable(estimator, residual, correspondence, geometry) seen before each LiDAR gate
        self.gate_probe = None
        self.state = self._initial_state(init_error)

    # -- initialization

    def _initial_state(self, init_error):
        cfg = self.cfg.init
        t0 = float(self.imu.t[0])
        if cfg.mode == "static":
            t_start = t0 + cfg.static_window
            sel = (self.imu.t >= t0) & (self.imu.t <= t_start)
            if t_start > self.imu.t[-1] or sel.sum() < 2:
                raise InitializationError("IMU log shorter than the static window")
            q = gravity_aligned_orientation(self.imu.a[sel].mean(axis=0))
            imu = ImuState(q, np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3))
        elif cfg.mode == "truth":
            if self.truth is None:
                raise InitializationError("truth initialization needs a ground-truth trajectory")
            t_start = max(t0, float(self.truth.t[0]))
            q, p, v, bg, ba = self.truth.at(t_start)
            imu = ImuState(np.array(q), np.array(bg), np.array(v), np.array(ba), np.array(p))
        else:
            raise InitializationError(f"unknown init mode {cfg.mode!r}")
        state = FullState.initial(imu, cfg.cam.to_extrinsics(), cfg.lidar.to_extrinsics(),
                                  cfg.prior.covariance(), t_start)
        if init_error is not None:
            cov = state.cov
            state = boxplus(state, np.asarray(init_error, dtype=float))
            state.cov = cov
        return state

    # -- bookkeeping

    def _record(self, sensor):
        nees = np.nan
        # the estimate shares the truth frame only when started from it
        if self.truth is not None and self.cfg.init.mode == "truth":
            try:
                q, p, *_ = self.truth.at(self.state.t)
                nees = pose_nees(self.state, q, p)
            except ValueError:
                pass
        self.history.append(self.state, sensor, nees)
        tr = np.trace(self.state.cov[POS:POS + 3, POS:POS + 3])
        if not np.isfinite(tr) or tr > self.cfg.divergence_trace:
            raise DivergenceError(f"position covariance trace {tr:.3g} m^2 at t={self.state.t:.3f}")

    def _propagate(self, t_imu):
        if t_imu > self.state.t:
            self.state = propagate_with_covariance(self.state, self.imu, self.cfg.imu, t_imu,
                                                   self.cfg.max_imu_gap)

    def _omega_hat(self, t):
        w, _ = self.imu.interpolate(t)
        return w - self.state.imu.bg

    def _update(self, blocks):
        if not blocks:
            return
        block = stack_blocks(blocks)
        try:
            self.state = ekf_update(self.state, block)
        except UpdateError as exc:
            self.diag.update_failures += 1
            log.warning("update skipped at t=%.3f: %s", self.state.t, exc)

    # -- camera

    def _marginalize_camera(self):
        clones = self.state.cam_clones
        oldest = clones[0].t
        index = 0
        if any(o[0] == oldest for tr in self.tracks.values() for o in tr.observations):
            index = 1
            drop = clones[1].t
            for tr in self.tracks.values():
                tr.observations = [o for o in tr.observations if o[0] != drop]
        self.state = marginalize_clone(self.state, Sensor.CAMERA, index)

    def _visual_block(self, track):
        cfg = self.cfg.camera
        times = {c.t for c in self.state.cam_clones}
        track = FeatureTrack(track.id, [o for o in track.observations if o[0] in times])
        if len(track) < max(cfg.min_track_length, 2):
            return None
        try:
            pf = triangulate(track, self.state, cfg.min_parallax_deg)
            r, Hx, Hf = visual_residual_jacobians(track, pf, self.state)
            ro, Ho = nullspace_project(r, Hx, Hf)
        except (TriangulationError, RankDeficient):
            self.diag.tracks_failed += 1
            return None
        var = cfg.intrinsics.normalized_sigma(cfg.pixel_sigma) ** 2
        if cfg.gate and not chi_squared_gate(ro, Ho, self.state.cov, var, self.cfg.gate_confidence):
            self.diag.tracks_rejected += 1
            return None
        self.diag.tracks_used += 1
        return ResidualBlock(ro, Ho, np.full(len(ro), var))

    def camera_step(self, rec, t_imu):
        self.diag.camera_frames += 1
        self._propagate(t_imu)
        if len(self.state.cam_clones) >= self.cfg.m:
            self._marginalize_camera()
        self.state = augment_clone(self.state, Sensor.CAMERA, self._omega_hat(t_imu), t_imu, self.cfg.m)
        seen = set()
        for i, u, v in rec.tracks:
            self.tracks.setdefault(i, FeatureTrack(i)).add(t_imu, u, v)
            seen.add(i)
        ready = [i for i, tr in self.tracks.items() if i not in seen or len(tr) >= self.cfg.m]
        blocks = []
        for i in sorted(ready):
            block = self._visual_block(self.tracks.pop(i))
            if block is not None:
                blocks.append(block)
        self._update(blocks)

    # -- lidar

    def _point_covs(self, corr):
        cfg = self.cfg.lidar
        base = cfg.point_sigma ** 2
        pts = [corr.source] + list(corr.anchors)
        if corr.kind is FeatureKind.EDGE and cfg.azimuth_resolution_deg > 0:
            res = np.radians(cfg.azimuth_resolution_deg)
            return [(base + (np.linalg.norm(p) * res) ** 2 / 12.0) * np.eye(3) for p in pts]
        return [base * np.eye(3) for _ in pts]

    def _lidar_blocks(self, features, l, l1):
        cfg = self.cfg.lidar
        st = self.state
        geom = PairGeometry.of(st, l, l1)
        rel = (geom.R_rel, geom.t_rel)
        kinds = [k for k, on in ((FeatureKind.EDGE, cfg.use_edges), (FeatureKind.SURF, cfg.use_surf)) if on]
        used_anchor_keys = set()
        sources = set()
        r, H, noise = [], [], []
        for kind in kinds:
            index = self.prev_index.get(kind)
            cand = [f for f in features if f.kind is kind]
            for f in _spread(cand, cfg.max_sources):
                sources.add(id(f))
                if index is None or len(index) == 0:
                    self.diag.lidar_unmatched += 1
                    continue
                proj = rel[0] @ f.position + rel[1]
                try:
                    corr = find_anchors(proj, index, cfg.max_correspondence_distance, f)
                    if kind is FeatureKind.SURF and f.direction is not None:
                        check_plane_tangent(corr, rel[0] @ f.direction, cfg.max_plane_tangent_cos)
                    keys = {a.tobytes() for a in corr.anchors}
                    if cfg.unique_anchors and keys & used_anchor_keys:
                        raise NoCorrespondence("anchor already used in this scan")
                    res = residual_jacobian(st, corr, l, l1, geom=geom)
                    var = propagate_point_noise(corr, self._point_covs(corr), rel[0], proj)
                except (NoCorrespondence, DegenerateAnchors):
                    self.diag.lidar_unmatched += 1
                    continue
                if kind is FeatureKind.EDGE:
                    var *= cfg.edge_variance_scale
                res.noise_var = max(var, 1e-12)
                if self.gate_probe is not None:
                    self.gate_probe(self, res, corr, geom)
                if not mahalanobis_gate(res, st.cov, self.cfg.gate_confidence):
                    self.diag.lidar_rejected += 1
                    continue
                used_anchor_keys |= keys
                self.diag.lidar_accepted += 1
                r.append(-res.signed)
                H.append(res.jacobian)
                noise.append(res.noise_var)
        block = ResidualBlock(np.array(r), np.array(H).reshape(len(r), st.dim), np.array(noise)) if r else None
        return block, sources

    def lidar_step(self, rec, t_imu):
        self.diag.lidar_scans += 1
        self._propagate(t_imu)
        if len(self.state.lidar_clones) >= self.cfg.n:
            self.state = marginalize_clone(self.state, Sensor.LIDAR, 0)
        self.state = augment_clone(self.state, Sensor.LIDAR, self._omega_hat(t_imu), t_imu, self.cfg.n)
        cfg = self.cfg.lidar
        scan = LidarScan(rec.t, rec.rings)
        curv = scan_curvatures(scan, cfg.extraction.neighbors)
        features = extract_features(scan, cfg.extraction, curv)
        sources = set()
        if self.prev_index is not None and len(self.state.lidar_clones) >= 2:
            nl = len(self.state.lidar_clones)
            block, sources = self._lidar_blocks(features, nl - 2, nl - 1)
            self._update([block] if block is not None else [])
        # points that served as sources are kept out of the next scan's anchors
        used = {f.position.tobytes() for f in features if id(f) in sources}
        same_k = cfg.anchor_extraction.neighbors == cfg.extraction.neighbors
        dense = extract_features(scan, cfg.anchor_extraction, curv if same_k else None)
        anchors = [f for f in dense if f.position.tobytes() not in used]
        self.prev_index = {k: FeatureIndex.build(anchors, k) for k in FeatureKind}

    # -- main loop

    def run(self, lidar_records, cam_records):
        """Process exteroceptive records and return an :class:`EstimatorResult`."""
        queues = {Sensor.LIDAR: list(lidar_records) if self.cfg.use_lidar else [],
                  Sensor.CAMERA: list(cam_records) if self.cfg.use_camera else []}
        heads = {s: 0 for s in queues}
        t_end = float(self.imu.t[-1])
        while True:
            best = None
            for s, q in queues.items():
                if heads[s] < len(q):
                    t = corrected_imu_time(q[heads[s]].t, self.state.calib(s).td)
                    if best is None or t < best[1]:
                        best = (s, t)
            if best is None:
                break
            sensor, t_imu = best
            rec = queues[sensor][heads[sensor]]
            heads[sensor] += 1
            t_imu = max(t_imu, self.state.t)
            clones = self.state.clones(sensor)
            if t_imu > t_end or t_imu < self.imu.t[0] or (clones and t_imu <= clones[-1].t):
                self.diag.skipped_records += 1
                continue
            if sensor is Sensor.LIDAR:
                self.lidar_step(rec, t_imu)
            else:
                self.camera_step(rec, t_imu)
            self.diag.steps += 1
            self._record(sensor.value)
        return self.history.result(self.diag, self.state)


def check_plane_tangent(corr, direction, max_cos):
    """Reject surf anchors whose plane does not contain the source's ring direction."""
    a, b, c = corr.anchors
    n = np.cross(b - a, c - a)
    nn = np.linalg.norm(n)
    if nn < 1e-12:
        raise DegenerateAnchors("collinear surf anchors")
    if abs(n @ direction) / nn > max_cos:
        raise NoCorrespondence("anchor plane inconsistent with the local surface")


def find_anchors(projected, index, max_distance, feature):
    return find_correspondence(projected, index, max_distance, source=feature.position,
                               source_ring=feature.ring)


def split_records(records):
    """``(imu buffer or None, lidar records, camera records)``, each time-sorted."""
    imu_recs = sorted((r for r in records if r.kind == "imu"), key=lambda r: r.t)
    lidar = sorted((r for r in records if r.kind == "lidar"), key=lambda r: r.t)
    cam = sorted((r for r in records if r.kind == "cam"), key=lambda r: r.t)
    if len(imu_recs) < 2:
        return None, lidar, cam
    buf = ImuBuffer([r.t for r in imu_recs], [r.w for r in imu_recs], [r.a for r in imu_recs])
    return buf, lidar, cam


def run_estimator(config: EstimatorConfig, records, truth=None, init_error=None) -> EstimatorResult:
    """Run the filter over a list of sensor records (any order; sorted per sensor)."""
    buf, lidar, cam = split_records(records)
    if buf is None:
        if lidar or cam:
            raise InitializationError("exteroceptive records without IMU data")
        return _History().result(Diagnostics(), None)
    return run_from_buffer(config, buf, lidar, cam, truth, init_error)


def run_from_buffer(config, imu: ImuBuffer, lidar, cam, truth=None, init_error=None):
    est = Estimator(config, imu, truth, init_error)
    return est.run(lidar, cam)
