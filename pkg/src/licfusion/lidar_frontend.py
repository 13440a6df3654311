"""Ring-organized scans, curvature-based edge/surf extraction and scan-to-scan association."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.spatial import cKDTree

from .rotation import rot_matrix


class FeatureKind(enum.Enum):
    EDGE = "edge"
    SURF = "surf"


class NoCorrespondence(LookupError):
    pass


@dataclass
class LidarScan:
    timestamp: float  # LiDAR clock
    rings: list  # one (N_r, 3) array per ring, ordered by azimuth

    def __post_init__(self):
        self.rings = [np.asarray(r, dtype=float).reshape(-1, 3) for r in self.rings]

    @property
    def num_points(self):
        return sum(len(r) for r in self.rings)


@dataclass
class LidarFeature:
    position: np.ndarray
    ring: int
    kind: FeatureKind
    curvature: float
    direction: np.ndarray = None  # unit ring direction through the point, from its neighbourhood


@dataclass
class Correspondence:
    kind: FeatureKind
    source: np.ndarray  # feature point in the newer scan frame
    projected: np.ndarray  # the same point projected into the older scan frame
    anchors: np.ndarray  # (2, 3) for edges, (3, 3) for surfs, older scan frame
    anchor_rings: tuple
    source_ring: int = -1


@dataclass
class ExtractionConfig:
    neighbors: int = 5  # points each side used for curvature
    edge_threshold: float = 0.5
    surf_threshold: float = 0.1
    sectors: int = 6
    max_edge_per_sector: int = 2
    max_surf_per_sector: int = 4
    min_range: float = 0.3
    suppression: int = None  # points blocked each side of a selection; defaults to ``neighbors``


def ring_curvature(points, k):
    """Scale-free curvature of each ring point over ``k`` neighbours each side.

    ``c_i = |sum_j (p_j - p_i)| / sum_j |p_j - p_i|``: 0 on a straight run,
    ``cos(phi / 2)`` at a symmetric fold of interior angle ``phi``. Points
    without a full neighbourhood get NaN.
    """
    n = len(points)
    c = np.full(n, np.nan)
    if n < 2 * k + 1:
        return c
    idx = np.arange(k, n - k)
    total = np.zeros((len(idx), 3))
    lengths = np.zeros(len(idx))
    for off in range(1, k + 1):
        for j in (idx - off, idx + off):
            d = points[j] - points[idx]
            total += d
            lengths += np.linalg.norm(d, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        c[idx] = np.linalg.norm(total, axis=1) / lengths
    return c


@numba.njit(cache=True)
def _pick(order, lo, curv, ok, suppressed, flags, cap, ks, edge, threshold):
    count = 0
    n = len(curv)
    for o in order:
        if count >= cap:
            break
        i = lo + o
        if suppressed[i] or not ok[i]:
            continue
        c = curv[i]
        if (edge and not c >= threshold) or (not edge and not c <= threshold):
            continue
        flags[i] = True
        count += 1
        suppressed[max(i - ks, 0):min(i + ks + 1, n)] = True


@numba.njit(cache=True)
def _select_ring(curv, ok, bounds, max_edge, max_surf, edge_threshold, surf_threshold, ks):
    """Per-sector edge picks (descending score) then surf picks (ascending), stable order."""
    n = len(curv)
    suppressed = np.zeros(n, dtype=np.bool_)
    edge = np.zeros(n, dtype=np.bool_)
    surf = np.zeros(n, dtype=np.bool_)
    for s in range(len(bounds) - 1):
        lo, hi = bounds[s], bounds[s + 1]
        vals = curv[lo:hi].copy()
        for j in range(len(vals)):
            if not np.isfinite(vals[j]):
                vals[j] = 0.0
        _pick(np.argsort(-vals, kind="mergesort"), lo, curv, ok, suppressed, edge, max_edge, ks,
              True, edge_threshold)
    for s in range(len(bounds) - 1):
        lo, hi = bounds[s], bounds[s + 1]
        vals = curv[lo:hi].copy()
        for j in range(len(vals)):
            if not np.isfinite(vals[j]):
                vals[j] = np.inf
        _pick(np.argsort(vals, kind="mergesort"), lo, curv, ok, suppressed, surf, max_surf, ks,
              False, surf_threshold)
    return edge, surf


def scan_curvatures(scan: LidarScan, k):
    return [ring_curvature(pts, k) for pts in scan.rings]


def extract_features(scan: LidarScan, config: ExtractionConfig = None, curvatures=None):
    """Edge (high-curvature) and surf (low-curvature) points of every ring.

    ``curvatures`` may carry :func:`scan_curvatures` output computed with the
    same neighbourhood size, to share it between several extractions.
    """
    cfg = config or ExtractionConfig()
    k = cfg.neighbors
    ks = k if cfg.suppression is None else cfg.suppression
    features = []
    for r, pts in enumerate(scan.rings):
        n = len(pts)
        if n < 2 * k + 1:
            continue
        curv = ring_curvature(pts, k) if curvatures is None else curvatures[r]
        ok = np.isfinite(curv) & (np.einsum("ij,ij->i", pts, pts) > cfg.min_range ** 2)
        bounds = np.linspace(k, n - k, cfg.sectors + 1).astype(np.int64)
        edge, surf = _select_ring(np.asarray(curv, dtype=np.float64), ok, bounds,
                                  cfg.max_edge_per_sector, cfg.max_surf_per_sector,
                                  float(cfg.edge_threshold), float(cfg.surf_threshold), ks)
        for kind, flags in ((FeatureKind.EDGE, edge), (FeatureKind.SURF, surf)):
            idx = np.flatnonzero(flags)
            d = pts[idx + k] - pts[idx - k]
            d /= np.maximum(np.linalg.norm(d, axis=1), 1e-12)[:, None]
            for i, di in zip(idx, d):
                features.append(LidarFeature(pts[i].copy(), r, kind, float(curv[i]), di))
    return features


def relative_lidar_transform(state, clone_l, clone_l1):
    """Pose of LiDAR frame ``l+1`` expressed in LiDAR frame ``l``: ``(R, t)``."""
    R_LI = rot_matrix(state.lidar_calib.q)
    p_LI = state.lidar_calib.p
    R_l = rot_matrix(clone_l.q)
    R_l1 = rot_matrix(clone_l1.q)
    p_IL = -R_LI.T @ p_LI
    R = R_LI @ R_l @ (R_LI @ R_l1).T
    t = R_LI @ R_l @ (clone_l1.p - clone_l.p + R_l1.T @ p_IL) + p_LI
    return R, t


def project_point(p, rel):
    R, t = rel
    return R @ p + t


@dataclass
class FeatureIndex:
    """KD-trees over a scan's features of one kind, globally and per ring."""

    kind: FeatureKind
    points: np.ndarray
    rings: np.ndarray
    tree: cKDTree = field(repr=False, default=None)
    ring_trees: dict = field(repr=False, default_factory=dict)
    ring_members: dict = field(repr=False, default_factory=dict)

    @classmethod
    def build(cls, features, kind):
        sel = [f for f in features if f.kind is kind]
        pts = np.array([f.position for f in sel], dtype=float).reshape(-1, 3)
        rings = np.array([f.ring for f in sel], dtype=int)
        index = cls(kind, pts, rings)
        if len(pts):
            index.tree = cKDTree(pts)
            for r in np.unique(rings):
                members = np.flatnonzero(rings == r)
                index.ring_members[int(r)] = members
                index.ring_trees[int(r)] = cKDTree(pts[members])
        return index

    def __len__(self):
        return len(self.points)

    def nearest_on_ring(self, query, ring, k=1):
        """Global indices and distances of the ``k`` nearest features on ``ring``."""
        tree = self.ring_trees.get(int(ring))
        if tree is None:
            return np.array([], dtype=int), np.array([])
        kk = min(k, tree.n)
        d, i = tree.query(query, k=kk)
        d, i = np.atleast_1d(d), np.atleast_1d(i)
        return self.ring_members[int(ring)][i], d


def find_correspondence(projected, index: FeatureIndex, max_distance=1.0, source=None, source_ring=-1):
    """Anchor features in the older scan for one projected feature point.

    Edge: nearest feature (ring r) plus the nearest feature on ring r-1 or r+1.
    Surf: nearest feature, the next nearest on the same ring, and the nearest
    on an adjacent ring. Raises :class:`NoCorrespondence` when any anchor is
    missing or farther than ``max_distance``.
    """
    projected = np.asarray(projected, dtype=float)
    if len(index) == 0:
        raise NoCorrespondence("empty feature index")
    d, j = index.tree.query(projected)
    if d > max_distance:
        raise NoCorrespondence(f"nearest {index.kind.value} feature {d:.3f} m away")
    r = int(index.rings[j])
    best = None
    for rr in (r - 1, r + 1):
        ids, ds = index.nearest_on_ring(projected, rr)
        if len(ids) and (best is None or ds[0] < best[1]):
            best = (ids[0], ds[0], rr)
    if best is None or best[1] > max_distance:
        raise NoCorrespondence("no anchor on an adjacent ring")
    src = projected if source is None else np.asarray(source, dtype=float)
    if index.kind is FeatureKind.EDGE:
        ids = [j, best[0]]
        rings = (r, best[2])
    else:
        same, ds = index.nearest_on_ring(projected, r, k=2)
        others = [(i, dd) for i, dd in zip(same, ds) if i != j]
        if not others or others[0][1] > max_distance:
            raise NoCorrespondence("no second anchor on the same ring")
        ids = [j, others[0][0], best[0]]
        rings = (r, r, best[2])
    anchors = index.points[ids].copy()
    return Correspondence(index.kind, src.copy(), projected.copy(), anchors, rings, source_ring)
