import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from licfusion.lidar_frontend import (
    ExtractionConfig, FeatureIndex, FeatureKind, LidarFeature, LidarScan, NoCorrespondence, extract_features,
    find_correspondence, project_point, relative_lidar_transform, ring_curvature,
)
from licfusion.rotation import rot_matrix
from licfusion.selftest import random_rotation, random_state
from licfusion.state import ClonePose, Sensor, SensorExtrinsics


def corner_ring(spacing=0.1, z=0.0):
    """Ring sweeping wall y = 3 then wall x = 3, with the crease at (3, 3) mid-sector."""
    n = int(round(7.5 / spacing))
    a = np.array([[3.0 - (n - i) * spacing, 3.0, z] for i in range(n)])
    b = np.array([[3.0, 3.0 - i * spacing, z] for i in range(int(round(6.0 / spacing)) + 1)])
    return np.vstack((a, b)), n


def test_collinear_ring_has_no_edges():
    pts = np.column_stack((np.linspace(-3, 3, 120), np.full(120, 2.0), np.zeros(120)))
    assert np.allclose(ring_curvature(pts, 5)[5:-5], 0.0, atol=1e-12)
    feats = extract_features(LidarScan(0.0, [pts]))
    assert not [f for f in feats if f.kind is FeatureKind.EDGE]


def test_crease_is_edge_and_interiors_are_surf():
    pts, corner = corner_ring()
    feats = extract_features(LidarScan(0.0, [pts, pts + [0, 0, 0.2]]))
    edges = [f for f in feats if f.kind is FeatureKind.EDGE]
    surfs = [f for f in feats if f.kind is FeatureKind.SURF]
    assert len(edges) == 2 and surfs
    for f in edges:
        assert np.allclose(f.position[:2], [3.0, 3.0], atol=1e-12)
    # surf points lie on one wall and outside the fold neighbourhood
    for f in surfs:
        on_wall = min(abs(f.position[0] - 3.0), abs(f.position[1] - 3.0)) < 1e-12
        assert on_wall and np.linalg.norm(f.position[:2] - [3.0, 3.0]) > 0.3


def test_sector_caps():
    rng = np.random.default_rng(0)
    pts = np.column_stack((np.linspace(-3, 3, 600), 2.0 + rng.uniform(-0.2, 0.2, 600), np.zeros(600)))
    cfg = ExtractionConfig(max_edge_per_sector=2, max_surf_per_sector=4)
    feats = extract_features(LidarScan(0.0, [pts]), cfg)
    bounds = np.linspace(cfg.neighbors, 600 - cfg.neighbors, cfg.sectors + 1).astype(int)
    idx = {tuple(p): i for i, p in enumerate(pts)}
    for kind, cap in ((FeatureKind.EDGE, 2), (FeatureKind.SURF, 4)):
        where = [idx[tuple(f.position)] for f in feats if f.kind is kind]
        sectors = np.searchsorted(bounds, where, side="right") - 1
        assert np.bincount(sectors).max(initial=0) <= cap
    assert any(f.kind is FeatureKind.EDGE for f in feats)


def test_short_ring_is_skipped():
    assert extract_features(LidarScan(0.0, [np.zeros((5, 3)) + 1.0])) == []


def test_extraction_is_deterministic():
    pts, _ = corner_ring(0.05)
    scan = LidarScan(0.0, [pts, pts + [0, 0, 0.3]])
    a, b = extract_features(scan), extract_features(scan)
    assert [(f.ring, f.kind, tuple(f.position)) for f in a] == [(f.ring, f.kind, tuple(f.position)) for f in b]


# ---------------------------------------------------------------- relative transform


def test_identical_clones_give_identity(rng):
    s = random_state(rng)
    c = s.lidar_clones[0]
    R, t = relative_lidar_transform(s, c, c)
    assert np.allclose(R, np.eye(3), atol=1e-12) and np.allclose(t, 0.0, atol=1e-12)


def test_identity_extrinsics_reduce_to_imu_motion(rng):
    s = random_state(rng)
    s.lidar_calib = SensorExtrinsics()
    a, b = s.lidar_clones
    R, t = relative_lidar_transform(s, a, b)
    assert np.allclose(R, rot_matrix(a.q) @ rot_matrix(b.q).T, atol=1e-12)
    assert np.allclose(t, rot_matrix(a.q) @ (b.p - a.p), atol=1e-12)


def _homogeneous(R, t):
    T = np.eye(4)
    T[:3, :3], T[:3, 3] = R, t
    return T


def test_transforms_compose(rng):
    s = random_state(rng)
    clones = [ClonePose(random_rotation(rng), rng.normal(size=3), float(k), Sensor.LIDAR) for k in range(3)]
    T01 = _homogeneous(*relative_lidar_transform(s, clones[0], clones[1]))
    T12 = _homogeneous(*relative_lidar_transform(s, clones[1], clones[2]))
    T02 = _homogeneous(*relative_lidar_transform(s, clones[0], clones[2]))
    assert np.allclose(T01 @ T12, T02, atol=1e-10)


def test_project_point(rng):
    p = rng.normal(size=3)
    assert np.array_equal(project_point(p, (np.eye(3), np.zeros(3))), p)
    t = rng.normal(size=3)
    assert np.allclose(project_point(p, (np.eye(3), t)), p + t)
    R, t = rot_matrix(random_rotation(rng)), rng.normal(size=3)
    assert np.allclose(project_point(p, (R, t)), (_homogeneous(R, t) @ np.r_[p, 1.0])[:3], atol=1e-12)


# ---------------------------------------------------------------- correspondences


def plane_features(rng, rings=6, per_ring=40, kind=FeatureKind.SURF):
    feats = []
    for r in range(rings):
        xs = np.sort(rng.uniform(-2, 2, per_ring))
        for x in xs:
            feats.append(LidarFeature(np.array([x, 3.0, 0.1 * r + rng.uniform(-0.01, 0.01)]), r, kind, 0.0))
    return feats


def brute_force_surf(q, feats):
    d = [np.linalg.norm(f.position - q) for f in feats]
    j = int(np.argmin(d))
    r = feats[j].ring
    same = [i for i, f in enumerate(feats) if f.ring == r and i != j]
    k = min(same, key=lambda i: d[i])
    adj = [i for i, f in enumerate(feats) if abs(f.ring - r) == 1]
    l = min(adj, key=lambda i: d[i])
    return j, k, l


def test_zero_distance_edge_match():
    feats = [LidarFeature(np.array([1.0, 2.0, 0.0]), 3, FeatureKind.EDGE, 1.0),
             LidarFeature(np.array([1.0, 2.0, 0.2]), 4, FeatureKind.EDGE, 1.0),
             LidarFeature(np.array([5.0, 2.0, 0.0]), 3, FeatureKind.EDGE, 1.0)]
    index = FeatureIndex.build(feats, FeatureKind.EDGE)
    corr = find_correspondence([1.0, 2.0, 0.0], index)
    assert np.array_equal(corr.anchors, [[1.0, 2.0, 0.0], [1.0, 2.0, 0.2]])
    assert corr.anchor_rings == (3, 4)


def test_no_feature_in_range():
    index = FeatureIndex.build([LidarFeature(np.zeros(3) + 5, 0, FeatureKind.EDGE, 1.0)], FeatureKind.EDGE)
    with pytest.raises(NoCorrespondence):
        find_correspondence([0.0, 0.0, 0.0], index, max_distance=1.0)
    with pytest.raises(NoCorrespondence):
        find_correspondence([0.0, 0.0, 0.0], FeatureIndex.build([], FeatureKind.EDGE))


def test_surf_anchors_match_exhaustive_search(rng):
    feats = plane_features(rng)
    index = FeatureIndex.build(feats, FeatureKind.SURF)
    for _ in range(200):
        q = np.array([rng.uniform(-1.8, 1.8), 3.0 + rng.uniform(-0.05, 0.05), rng.uniform(0.05, 0.45)])
        corr = find_correspondence(q, index, max_distance=10.0)
        j, k, l = brute_force_surf(q, feats)
        assert np.array_equal(corr.anchors, [feats[j].position, feats[k].position, feats[l].position])


def test_edge_anchors_on_adjacent_rings(rng):
    feats = plane_features(rng, kind=FeatureKind.EDGE)
    index = FeatureIndex.build(feats, FeatureKind.EDGE)
    for _ in range(200):
        q = np.array([rng.uniform(-2, 2), 3.0, rng.uniform(-0.1, 0.6)])
        corr = find_correspondence(q, index, max_distance=10.0)
        assert abs(corr.anchor_rings[0] - corr.anchor_rings[1]) == 1
        assert not np.array_equal(corr.anchors[0], corr.anchors[1])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 1000), st.integers(0, 2 ** 31 - 1))
def test_kdtree_matches_exhaustive(n, seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-5, 5, (n, 3))
    rings = rng.integers(0, 4, n)
    feats = [LidarFeature(p, int(r), FeatureKind.SURF, 0.0) for p, r in zip(pts, rings)]
    index = FeatureIndex.build(feats, FeatureKind.SURF)
    for q in rng.uniform(-5, 5, (5, 3)):
        d = np.linalg.norm(pts - q, axis=1)
        assert np.isclose(index.tree.query(q)[0], d.min(), rtol=0, atol=1e-12)
        for r in np.unique(rings):
            ids, ds = index.nearest_on_ring(q, r)
            assert np.isclose(ds[0], d[rings == r].min(), rtol=0, atol=1e-12)

