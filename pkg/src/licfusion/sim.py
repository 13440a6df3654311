"""Synthetic world, analytic trajectories and IMU / LiDAR / camera measurement synthesis."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .propagation import ImuBuffer, ImuNoiseParams
from .rotation import normalize, rot_matrix, rot_to_quat
from .sensorlog import CamRecord, ImuRecord, LidarRecord
from .state import SensorExtrinsics
from .vision import CameraModel, FeatureTrack


class SpanError(ValueError):
    pass


# ---------------------------------------------------------------- world


@dataclass
class Plane:
    point: np.ndarray
    normal: np.ndarray
    u: np.ndarray  # in-plane axis; the other axis is normal x u
    extent: tuple  # half sizes along u and normal x u

    @property
    def v(self):
        return np.cross(self.normal, self.u)

    def contains(self, x, tol=1e-9):
        d = np.asarray(x) - self.point
        return (np.abs(d @ self.normal) <= tol
                and np.all(np.abs([d @ self.u, d @ self.v]) <= np.asarray(self.extent) + tol))


@dataclass
class Segment:
    a: np.ndarray
    b: np.ndarray
    planes: tuple = ()  # indices of the parent planes, when derived


@dataclass
class WorldModel:
    planes: list
    edges: list
    landmarks: np.ndarray

    @classmethod
    def room(cls, size=(10.0, 10.0, 3.0), n_landmarks=200, seed=0, margin=0.2, extra_edges=()):
        """Axis-aligned box ``[-sx/2, sx/2] x [-sy/2, sy/2] x [0, sz]``."""
        sx, sy, sz = size
        c = np.array([0.0, 0.0, sz / 2])
        ex, ey, ez = np.eye(3)
        planes = [
            Plane(c + ex * sx / 2, -ex, ey, (sy / 2, sz / 2)),
            Plane(c - ex * sx / 2, ex, ey, (sy / 2, sz / 2)),
            Plane(c + ey * sy / 2, -ey, ex, (sx / 2, sz / 2)),
            Plane(c - ey * sy / 2, ey, ex, (sx / 2, sz / 2)),
            Plane(np.array([0.0, 0.0, 0.0]), ez, ex, (sx / 2, sy / 2)),
            Plane(np.array([0.0, 0.0, sz]), -ez, ex, (sx / 2, sy / 2)),
        ]
        rng = np.random.default_rng(seed)
        lo = np.array([-sx / 2 + margin, -sy / 2 + margin, margin])
        hi = np.array([sx / 2 - margin, sy / 2 - margin, sz - margin])
        landmarks = rng.uniform(lo, hi, size=(n_landmarks, 3))
        edges = derive_edges(planes) + [Segment(np.asarray(a, float), np.asarray(b, float)) for a, b in extra_edges]
        return cls(planes, edges, landmarks)


def _clip_line_to_plane(origin, direction, plane):
    """Parameter interval of the line origin + s*direction inside the plane rectangle."""
    lo, hi = -np.inf, np.inf
    for axis, half in ((plane.u, plane.extent[0]), (plane.v, plane.extent[1])):
        o = (origin - plane.point) @ axis
        d = direction @ axis
        if abs(d) < 1e-12:
            if abs(o) > half + 1e-12:
                return None
            continue
        s0, s1 = sorted(((-half - o) / d, (half - o) / d))
        lo, hi = max(lo, s0), min(hi, s1)
    return (lo, hi) if lo <= hi else None


def derive_edges(planes, min_length=1e-6):
    """Intersection segments of every non-parallel pair of finite planes."""
    edges = []
    for i in range(len(planes)):
        for j in range(i + 1, len(planes)):
            a, b = planes[i], planes[j]
            d = np.cross(a.normal, b.normal)
            nd = np.linalg.norm(d)
            if nd < 1e-9:
                continue
            d = d / nd
            # point on both planes, closest to the origin of plane a
            A = np.vstack((a.normal, b.normal, d))
            rhs = np.array([a.normal @ a.point, b.normal @ b.point, d @ a.point])
            x0 = np.linalg.solve(A, rhs)
            ia = _clip_line_to_plane(x0, d, a)
            ib = _clip_line_to_plane(x0, d, b)
            if ia is None or ib is None:
                continue
            lo, hi = max(ia[0], ib[0]), min(ia[1], ib[1])
            if hi - lo < min_length:
                continue
            edges.append(Segment(x0 + lo * d, x0 + hi * d, (i, j)))
    return edges


def raycast(world: WorldModel, origin, dirs, min_range=0.3, max_range=100.0):
    """Nearest plane hit distance per ray (``inf`` when nothing is hit)."""
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    best = np.full(len(dirs), np.inf)
    for pl in world.planes:
        denom = dirs @ pl.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((pl.point - origin) @ pl.normal) / denom
        ok = (np.abs(denom) > 1e-12) & (t > min_range) & (t < max_range)
        hit = origin + t[:, None] * dirs
        rel = hit - pl.point
        ok &= np.abs(rel @ pl.u) <= pl.extent[0] + 1e-9
        ok &= np.abs(rel @ pl.v) <= pl.extent[1] + 1e-9
        best = np.where(ok & (t < best), t, best)
    return best


# ---------------------------------------------------------------- trajectory


@dataclass
class TrajectoryConfig:
    """Sinusoidal position and ZYX Euler attitude, blended in after a still period.

    Offsets are relative to ``t = 0`` so the trajectory starts at ``start``
    with attitude ``euler0``.
    """

    start: tuple = (2.0, 0.0, 1.5)
    pos_amp: tuple = (2.0, 2.0, 0.3)
    pos_freq: tuple = (2 * np.pi / 20, 2 * np.pi / 20, 2 * np.pi / 10)
    pos_phase: tuple = (np.pi / 2, 0.0, 0.0)
    euler0: tuple = (0.0, 0.0, np.pi / 2)
    euler_rate: tuple = (0.0, 0.0, 2 * np.pi / 20)
    euler_amp: tuple = (0.34, 0.34, 0.52)  # rotational excitation keeps both extrinsics observable
    euler_freq: tuple = (2.7, 2.1, 1.5)
    euler_phase: tuple = (0.0, 0.0, 0.0)
    still_time: float = 1.0
    ramp_time: float = 2.0
    duration: float = 61.0

    @classmethod
    def stationary(cls, start=(0.0, 0.0, 1.5), euler0=(0.0, 0.0, 0.0), duration=10.0):
        z = (0.0, 0.0, 0.0)
        return cls(start, z, z, z, euler0, z, z, z, z, 0.0, 0.0, duration)

    @classmethod
    def circle(cls, radius, rate, height=1.5, duration=10.0):
        return cls((radius, 0.0, height), (radius, radius, 0.0), (rate, rate, 0.0),
                   (np.pi / 2, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0),
                   (0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0), 0.0, 0.0, duration)


@dataclass
class TrajectoryPoint:
    q: np.ndarray  # ^I_G q (JPL)
    p: np.ndarray
    v: np.ndarray
    w: np.ndarray  # body angular rate
    a: np.ndarray  # global acceleration


def _blend(t, still, ramp):
    """Quintic smoothstep from 0 to 1 over ``[still, still + ramp]`` with its derivatives."""
    t = np.asarray(t, dtype=float)
    if ramp <= 0.0:
        return (t >= still).astype(float), np.zeros_like(t), np.zeros_like(t)
    u = (t - still) / ramp
    inside = (u > 0.0) & (u < 1.0)
    s = np.where(u >= 1.0, 1.0, np.where(inside, u ** 3 * (10 - 15 * u + 6 * u * u), 0.0))
    ds = np.where(inside, 30 * u * u * (1 - u) ** 2 / ramp, 0.0)
    dds = np.where(inside, 60 * u * (1 - 3 * u + 2 * u * u) / ramp ** 2, 0.0)
    return s, ds, dds


def _sines(t, amp, freq, phase):
    amp, freq, phase = (np.asarray(x, dtype=float) for x in (amp, freq, phase))
    arg = np.multiply.outer(t, freq) + phase
    f = amp * (np.sin(arg) - np.sin(phase))
    df = amp * freq * np.cos(arg)
    ddf = -amp * freq ** 2 * np.sin(arg)
    return f, df, ddf


def _euler_quat(e):
    """JPL ``^I_G q`` for body-to-global ZYX Euler angles, rows of ``e``; scalar part >= 0."""
    h = 0.5 * e
    cr, cp, cy = np.cos(h).T
    sr, sp, sy = np.sin(h).T
    q = np.stack([sr * cp * cy - cr * sp * sy,
                  cr * sp * cy + sr * cp * sy,
                  cr * cp * sy - sr * sp * cy,
                  cr * cp * cy + sr * sp * sy], axis=-1)
    return q * np.where(q[:, 3:] < 0.0, -1.0, 1.0)


def _rotations(Q):
    """Stacked JPL rotation matrices ``R(q)`` for rows of ``Q``."""
    Q = Q / np.linalg.norm(Q, axis=1, keepdims=True)
    x, y, z, w = Q.T
    return np.stack([
        np.stack([w * w + x * x - y * y - z * z, 2 * (x * y + w * z), 2 * (x * z - w * y)], -1),
        np.stack([2 * (x * y - w * z), w * w - x * x + y * y - z * z, 2 * (y * z + w * x)], -1),
        np.stack([2 * (x * z + w * y), 2 * (y * z - w * x), w * w - x * x - y * y + z * z], -1),
    ], axis=1)


def trajectory_samples(ts, spec: TrajectoryConfig):
    """Vectorized :func:`trajectory_at`: arrays ``(q, p, v, w, a)`` with one row per time."""
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    if ts.size and (ts.min() < 0.0 or ts.max() > spec.duration + 1e-9):
        raise SpanError(f"times outside trajectory span [0, {spec.duration}]")
    s, ds, dds = (x[:, None] for x in _blend(ts, spec.still_time, spec.ramp_time))
    f, df, ddf = _sines(ts, spec.pos_amp, spec.pos_freq, spec.pos_phase)
    p = np.asarray(spec.start, dtype=float) + s * f
    v = ds * f + s * df
    a = dds * f + 2 * ds * df + s * ddf
    g, dg, _ = _sines(ts, spec.euler_amp, spec.euler_freq, spec.euler_phase)
    rate = np.asarray(spec.euler_rate, dtype=float)
    g = g + np.multiply.outer(ts, rate)
    dg = dg + rate
    e = np.asarray(spec.euler0, dtype=float) + s * g
    de = ds * g + s * dg
    roll, pitch = e[:, 0], e[:, 1]
    dr, dp, dy = de.T
    w = np.stack([
        dr - dy * np.sin(pitch),
        dp * np.cos(roll) + dy * np.sin(roll) * np.cos(pitch),
        -dp * np.sin(roll) + dy * np.cos(roll) * np.cos(pitch),
    ], axis=-1)
    return _euler_quat(e), p, v, w, a


def trajectory_at(t, spec: TrajectoryConfig) -> TrajectoryPoint:
    if t < 0.0 or t > spec.duration + 1e-9:
        raise SpanError(f"t={t} outside trajectory span [0, {spec.duration}]")
    q, p, v, w, a = trajectory_samples([t], spec)
    return TrajectoryPoint(q[0], p[0], v[0], w[0], a[0])


# ---------------------------------------------------------------- rig and truth


def _default_cam():
    # camera z forward / x right / y down, IMU x forward / y left / z up
    R = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    return SensorExtrinsics(rot_to_quat(R), np.array([0.03, -0.02, -0.08]), 0.008)


def _default_lidar():
    from .rotation import so3_exp

    R = so3_exp([0.02, -0.03, 0.05])
    return SensorExtrinsics(rot_to_quat(R), np.array([0.05, 0.02, -0.12]), -0.006)


@dataclass
class RigTruth:
    cam: SensorExtrinsics = field(default_factory=_default_cam)
    lidar: SensorExtrinsics = field(default_factory=_default_lidar)
    bg0: np.ndarray = field(default_factory=lambda: np.array([0.002, -0.001, 0.0015]))
    ba0: np.ndarray = field(default_factory=lambda: np.array([0.02, -0.015, 0.01]))
    noise: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    bias_walk: bool = True


@dataclass
class TruthTrajectory:
    t: np.ndarray
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    bg: np.ndarray
    ba: np.ndarray
    spec: TrajectoryConfig = None  # exact pose source when available
    loop: bool = False

    def at(self, t):
        """``(q, p, v, bg, ba)`` at time ``t`` (IMU clock)."""
        if t < self.t[0] - 1e-9 or t > self.t[-1] + 1e-9:
            raise SpanError(f"t={t} outside truth span")
        i = int(np.clip(np.searchsorted(self.t, t) - 1, 0, len(self.t) - 2))
        s = float(np.clip((t - self.t[i]) / (self.t[i + 1] - self.t[i]), 0.0, 1.0))
        bg = (1 - s) * self.bg[i] + s * self.bg[i + 1]
        ba = (1 - s) * self.ba[i] + s * self.ba[i + 1]
        if self.spec is not None:
            tp = trajectory_at(t, self.spec)
            return tp.q, tp.p, tp.v, bg, ba
        q0, q1 = self.q[i], self.q[i + 1]
        if q0 @ q1 < 0:
            q1 = -q1
        q = normalize((1 - s) * q0 + s * q1)
        p = (1 - s) * self.p[i] + s * self.p[i + 1]
        v = (1 - s) * self.v[i] + s * self.v[i + 1]
        return q, p, v, bg, ba


# ---------------------------------------------------------------- synthesis


def synthesize_imu(spec: TrajectoryConfig, rig: RigTruth, rate=200.0, seed=0, noise_free=False):
    """IMU readings ``w_m = w + b_g + n_g``, ``a_m = R (a - g) + b_a + n_a``.

    Returns ``(ImuBuffer, TruthTrajectory)`` sampled at the IMU times.
    """
    rng = np.random.default_rng(seed)
    n = int(np.floor(spec.duration * rate + 1e-9)) + 1
    ts = np.arange(n) / rate
    dt = 1.0 / rate
    nz = rig.noise
    g_sd = 0.0 if noise_free else nz.gyro_noise * np.sqrt(rate)
    a_sd = 0.0 if noise_free else nz.accel_noise * np.sqrt(rate)
    walk = rig.bias_walk and not noise_free
    bg, ba = np.array(rig.bg0, float), np.array(rig.ba0, float)
    noise = rng.standard_normal((n, 12))
    Q, P, V, Wt, At = trajectory_samples(np.minimum(ts, spec.duration), spec)
    if walk:
        BG = bg + np.cumsum(np.vstack((np.zeros(3), nz.gyro_walk * np.sqrt(dt) * noise[:-1, 6:9])), axis=0)
        BA = ba + np.cumsum(np.vstack((np.zeros(3), nz.accel_walk * np.sqrt(dt) * noise[:-1, 9:12])), axis=0)
    else:
        BG, BA = np.tile(bg, (n, 1)), np.tile(ba, (n, 1))
    # a_m = R (a - g): rotate each global specific force into its body frame
    R = _rotations(Q)
    W = Wt + BG + g_sd * noise[:, 0:3]
    A = np.einsum("nij,nj->ni", R, At - nz.gravity) + BA + a_sd * noise[:, 3:6]
    truth = TruthTrajectory(ts, P, Q, V, BG, BA, spec=spec)
    return ImuBuffer(ts, W, A), truth


@dataclass
class RingGeometry:
    n_rings: int = 16
    min_elevation_deg: float = -15.0
    max_elevation_deg: float = 15.0
    azimuth_step_deg: float = 1.0
    min_range: float = 0.3
    max_range: float = 100.0

    def directions(self):
        """Unit rays ``(n_rings, n_az, 3)`` in the LiDAR frame, azimuth-ordered."""
        el = np.radians(np.linspace(self.min_elevation_deg, self.max_elevation_deg, self.n_rings))
        az = np.radians(np.arange(-180.0, 180.0, self.azimuth_step_deg))
        ce, se = np.cos(el)[:, None], np.sin(el)[:, None]
        return np.stack([ce * np.cos(az), ce * np.sin(az), np.broadcast_to(se, (len(el), len(az)))], axis=-1)


def lidar_pose(q_IG, p_I, lidar: SensorExtrinsics):
    """``(R_LG, p_GL)`` for the LiDAR attached to an IMU pose."""
    R_LI = rot_matrix(lidar.q)
    R_IG = rot_matrix(q_IG)
    return R_LI @ R_IG, p_I + R_IG.T @ (-R_LI.T @ lidar.p)


def synthesize_lidar_scan(world, q_IG, p_I, rig: RigTruth, geometry: RingGeometry, t_imu,
                          sigma=0.02, rng=None):
    """Ray-cast one scan at a single pose (no intra-scan motion).

    The scan is stamped in the LiDAR clock, ``t_imu - t_dL``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    R_LG, origin = lidar_pose(q_IG, p_I, rig.lidar)
    dirs_L = geometry.directions()
    shape = dirs_L.shape[:2]
    flat = dirs_L.reshape(-1, 3)
    rng_hit = raycast(world, origin, flat @ R_LG, geometry.min_range, geometry.max_range)
    noise = rng.standard_normal(flat.shape) * sigma
    hit = np.isfinite(rng_hit)
    pts = flat * np.where(hit, rng_hit, 0.0)[:, None] + noise
    hit = hit.reshape(shape)
    pts = pts.reshape(shape + (3,))
    rings = [pts[r][hit[r]] for r in range(shape[0])]
    return LidarRecord(t_imu - rig.lidar.td, rings)


def synthesize_camera_tracks(world, poses, rig: RigTruth, camera: CameraModel, pixel_noise=1.0,
                             seed=0, dropout=0.0, min_depth=0.2):
    """Per-frame normalized observations with persistent track ids.

    ``poses`` is a list of ``(t_imu, q_IG, p_I)``. A track ends when its
    landmark leaves the view or is dropped; reappearing landmarks get a new id.
    Returns a list of :class:`CamRecord` stamped in the camera clock.
    """
    from .vision import camera_pose
    from .state import ClonePose, Sensor

    rng = np.random.default_rng(seed)
    sigma = pixel_noise / np.sqrt(camera.fx * camera.fy) if pixel_noise else 0.0
    active = {}
    next_id = 0
    frames = []
    L = world.landmarks
    for t, q, p in poses:
        R_CG, p_GC = camera_pose(ClonePose(q, p, t, Sensor.CAMERA), rig.cam)
        pc = (L - p_GC) @ R_CG.T
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = pc[:, :2] / pc[:, 2:3]
        visible = (pc[:, 2] > min_depth) & camera.in_image(camera.to_pixels(uv))
        keep = visible & (rng.random(len(L)) >= dropout)
        noise = rng.standard_normal((len(L), 2)) * sigma
        obs = []
        for j in np.flatnonzero(keep):
            if j not in active:
                active[j] = next_id
                next_id += 1
            z = uv[j] + noise[j]
            obs.append((active[j], float(z[0]), float(z[1])))
        for j in list(active):
            if not keep[j]:
                del active[j]
        frames.append(CamRecord(t - rig.cam.td, obs))
    return frames


def tracks_from_frames(frames, clone_times):
    """Assemble :class:`FeatureTrack` objects keyed to the given clone times."""
    tracks = {}
    for rec, tc in zip(frames, clone_times):
        for i, u, v in rec.tracks:
            tracks.setdefault(i, FeatureTrack(i)).add(tc, u, v)
    return list(tracks.values())


@dataclass
class SimConfig:
    duration: float = 61.0
    imu_rate: float = 200.0
    cam_rate: float = 10.0
    lidar_rate: float = 10.0
    cam_phase: float = 0.0
    lidar_phase: float = 0.05
    noise_free: bool = False
    lidar_sigma: float = 0.02
    pixel_noise: float = 1.0
    dropout: float = 0.02
    room_size: tuple = (10.0, 10.0, 3.0)
    n_landmarks: int = 200
    world_seed: int = 7
    use_camera: bool = True
    use_lidar: bool = True
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    rig: RigTruth = field(default_factory=RigTruth)
    rings: RingGeometry = field(default_factory=RingGeometry)
    camera: CameraModel = field(default_factory=CameraModel)


@dataclass
class SimResult:
    records: list
    truth: TruthTrajectory
    world: WorldModel
    config: SimConfig


def _sensor_times(rate, phase, start, end):
    k0 = int(np.ceil((start - phase) * rate - 1e-9))
    k1 = int(np.floor((end - phase) * rate + 1e-9))
    return [phase + k / rate for k in range(max(k0, 1), k1 + 1)]


def simulate(config: SimConfig, seed=0) -> SimResult:
    """Time-ordered sensor records (sensor clocks) plus ground truth."""
    cfg = config
    spec = cfg.trajectory
    if abs(spec.duration - cfg.duration) > 1e-12:
        spec = TrajectoryConfig(**{**spec.__dict__, "duration": cfg.duration})
    imu_seed, lidar_seed, cam_seed = np.random.SeedSequence(seed).spawn(3)
    world = WorldModel.room(cfg.room_size, cfg.n_landmarks, cfg.world_seed)
    imu, truth = synthesize_imu(spec, cfg.rig, cfg.imu_rate, imu_seed, cfg.noise_free)
    truth.loop = bool(np.linalg.norm(truth.p[-1] - truth.p[0]) < 0.05)
    events = [(float(t), 0, i, ImuRecord(float(t), imu.w[i], imu.a[i])) for i, t in enumerate(imu.t)]
    # exteroceptive sensors must stay inside the IMU span after clock correction
    margin = 0.05
    if cfg.use_lidar:
        lrng = np.random.default_rng(lidar_seed)
        sigma = 0.0 if cfg.noise_free else cfg.lidar_sigma
        for k, t in enumerate(_sensor_times(cfg.lidar_rate, cfg.lidar_phase, margin, spec.duration - margin)):
            tp = trajectory_at(t, spec)
            rec = synthesize_lidar_scan(world, tp.q, tp.p, cfg.rig, cfg.rings, t, sigma, lrng)
            events.append((t, 1, k, rec))
    if cfg.use_camera:
        times = _sensor_times(cfg.cam_rate, cfg.cam_phase, margin, spec.duration - margin)
        poses = []
        for t in times:
            tp = trajectory_at(t, spec)
            poses.append((t, tp.q, tp.p))
        pix = 0.0 if cfg.noise_free else cfg.pixel_noise
        drop = 0.0 if cfg.noise_free else cfg.dropout
        frames = synthesize_camera_tracks(world, poses, cfg.rig, cfg.camera, pix, cam_seed, drop)
        events += [(t, 2, k, rec) for k, (t, rec) in enumerate(zip(times, frames))]
    events.sort(key=lambda e: (e[0], e[1], e[2]))
    return SimResult([e[3] for e in events], truth, world, cfg)
