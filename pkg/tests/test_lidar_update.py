import numpy as np
import pytest
from scipy.stats import chi2

from licfusion.lidar_frontend import (
    Correspondence, FeatureIndex, FeatureKind, LidarScan, NoCorrespondence, extract_features, find_correspondence,
    relative_lidar_transform,
)
from licfusion.lidar_update import (
    DegenerateAnchors, LidarResidual, PairGeometry, edge_residual, mahalanobis_gate, propagate_point_noise,
    residual_jacobian, surf_residual,
)
from licfusion.rotation import rot_matrix
from licfusion.selftest import (
    check_edge_gradients, check_lidar_partials, check_lidar_residual, check_surf_gradients, random_rotation,
    random_state,
)
from licfusion.sim import RigTruth, RingGeometry, WorldModel, lidar_pose, synthesize_lidar_scan
from licfusion.state import CLONE_DIM, Sensor, SensorExtrinsics
from licfusion.update import chi_squared_quantile


# ---------------------------------------------------------------- distances


def test_edge_residual_examples(rng):
    pj, pk = np.zeros(3), np.array([0.0, 1.0, 0.0])
    assert edge_residual(np.array([0.0, 7.0, 0.0]), pj, pk) == 0.0
    assert edge_residual(np.array([1.0, 0.0, 0.0]), pj, pk) == 1.0
    with pytest.raises(DegenerateAnchors):
        edge_residual(np.ones(3), pj, pj + 1e-8)


def test_edge_residual_matches_orthogonal_projection(rng):
    for _ in range(200):
        pi, pj, pk = rng.normal(0, 3, (3, 3))
        u = (pk - pj) / np.linalg.norm(pk - pj)
        foot = pj + ((pi - pj) @ u) * u
        assert abs(edge_residual(pi, pj, pk) - np.linalg.norm(pi - foot)) < 1e-12


def test_surf_residual_examples(rng):
    pj, pk, pl = np.zeros(3), np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
    assert surf_residual(np.array([3.0, -2.0, 0.0]), pj, pk, pl) == 0.0
    assert surf_residual(np.array([3.0, -2.0, -0.7]), pj, pk, pl) == pytest.approx(0.7, abs=1e-15)
    with pytest.raises(DegenerateAnchors):
        surf_residual(np.ones(3), pj, pk, 2 * pk)


def test_surf_residual_matches_hessian_normal_form(rng):
    for _ in range(200):
        pi, pj, pk, pl = rng.normal(0, 3, (4, 3))
        n = np.linalg.svd(np.vstack((pk - pj, pl - pj)))[2][-1]
        assert abs(surf_residual(pi, pj, pk, pl) - abs(n @ pi - n @ pj)) < 1e-12


def test_residuals_invariant_to_rigid_motion(rng):
    for _ in range(100):
        pts = rng.normal(0, 3, (4, 3))
        R, t = rot_matrix(random_rotation(rng)), rng.normal(0, 10, 3)
        moved = pts @ R.T + t
        assert abs(edge_residual(*pts[:3]) - edge_residual(*moved[:3])) < 1e-10
        assert abs(surf_residual(*pts) - surf_residual(*moved)) < 1e-10


# ---------------------------------------------------------------- Jacobians


def test_distance_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    assert check_edge_gradients(rng, 100).passed
    assert check_surf_gradients(rng, 100).passed


def test_projection_partials_match_finite_differences():
    assert check_lidar_partials(np.random.default_rng(5), 100).passed


def test_residual_row_matches_finite_differences():
    assert check_lidar_residual(np.random.default_rng(6), 100).passed


def _surf_corr(state, rng, src=None):
    g = PairGeometry.of(state, 0, 1)
    src = rng.normal(0, 5, 3) if src is None else src
    p = g.R_rel @ src + g.t_rel
    return Correspondence(FeatureKind.SURF, src, p, p + rng.normal(0, 0.5, (3, 3)), (0, 0, 1))


def test_sparsity(rng):
    for _ in range(20):
        s = random_state(rng, n_cam=2, n_lidar=3)
        g = PairGeometry.of(s, 1, 2)
        src = rng.normal(0, 5, 3)
        p = g.R_rel @ src + g.t_rel
        corr = Correspondence(FeatureKind.EDGE, src, p, p + rng.normal(0, 0.5, (2, 3)), (0, 1))
        H = residual_jacobian(s, corr, 1, 2).jacobian
        allowed = np.zeros(s.dim, dtype=bool)
        for i in (1, 2):
            o = s.clone_offset(Sensor.LIDAR, i)
            allowed[o:o + CLONE_DIM] = True
        o = s.calib_offset(Sensor.LIDAR)
        allowed[o:o + 6] = True
        assert np.all(H[~allowed] == 0.0) and np.any(H[allowed] != 0.0)


def test_translation_antisymmetry_at_identity(rng):
    s = random_state(rng, n_cam=0, n_lidar=2)
    s.lidar_calib = SensorExtrinsics()
    s.lidar_clones[1].q = s.lidar_clones[0].q.copy()
    s.lidar_clones[1].p = s.lidar_clones[0].p.copy()
    H = residual_jacobian(s, _surf_corr(s, rng), 0, 1).jacobian
    o0, o1 = s.clone_offset(Sensor.LIDAR, 0), s.clone_offset(Sensor.LIDAR, 1)
    assert np.allclose(H[o0 + 3:o0 + 6], -H[o1 + 3:o1 + 6], atol=1e-14)


# ---------------------------------------------------------------- noise propagation


def test_point_noise_zero_and_scaling(rng):
    s = random_state(rng, 0, 2)
    corr = _surf_corr(s, rng)
    assert propagate_point_noise(corr, [np.zeros((3, 3))] * 4) == 0.0
    covs = []
    for _ in range(4):
        A = rng.normal(size=(3, 3))
        covs.append(A @ A.T)
    base = propagate_point_noise(corr, covs)
    assert propagate_point_noise(corr, [9.0 * C for C in covs]) == pytest.approx(9.0 * base, rel=1e-14)


@pytest.mark.parametrize("kind", [FeatureKind.EDGE, FeatureKind.SURF])
def test_point_noise_matches_monte_carlo(kind):
    rng = np.random.default_rng(11)
    sigma = 0.02
    n = 2 if kind is FeatureKind.EDGE else 3
    anchors = rng.normal(0, 1, (n, 3))
    offset = rng.normal(size=3)
    p = anchors.mean(axis=0) + offset / np.linalg.norm(offset)
    corr = Correspondence(kind, p, p, anchors, tuple(range(n)))
    var = propagate_point_noise(corr, [sigma ** 2 * np.eye(3)] * (n + 1))
    draws = 10 ** 5
    d_p = p + rng.normal(0, sigma, (draws, 3))
    d_a = anchors + rng.normal(0, sigma, (draws, n, 3))
    if kind is FeatureKind.EDGE:
        u = d_a[:, 1] - d_a[:, 0]
        w = d_p - d_a[:, 0]
        vals = np.linalg.norm(np.cross(w, u), axis=1) / np.linalg.norm(u, axis=1)
    else:
        c = np.cross(d_a[:, 1] - d_a[:, 0], d_a[:, 2] - d_a[:, 0])
        vals = np.einsum("ij,ij->i", d_p - d_a[:, 0], c) / np.linalg.norm(c, axis=1)
    assert abs(vals.var() / var - 1.0) < 0.05


# ---------------------------------------------------------------- gating


def _res(value, var, dim=4):
    return LidarResidual(abs(value), value, np.zeros(dim), var)


def test_gate_examples():
    P = np.eye(4)
    assert mahalanobis_gate(_res(0.0, 1e-4), P)
    assert not mahalanobis_gate(_res(10.0, 1e-6), P)
    assert not mahalanobis_gate(_res(0.0, 0.0), P)
    assert chi_squared_quantile(1, 0.95) == pytest.approx(3.8415, abs=1e-3)


def test_gate_threshold_uses_full_innovation(rng):
    P = np.diag([0.04, 0.01, 0.0, 0.0])
    res = LidarResidual(0.0, 0.0, np.array([1.0, 2.0, 0.0, 0.0]), 0.02)
    s = 0.04 + 4 * 0.01 + 0.02
    q = chi2.ppf(0.95, 1)
    res.value = np.sqrt(q * s) * 0.999
    assert mahalanobis_gate(res, P)
    res.value = np.sqrt(q * s) * 1.001
    assert not mahalanobis_gate(res, P)


def test_gate_acceptance_on_consistent_residuals(rng):
    accepted = 0
    n = 10 ** 4
    P = np.diag([0.01, 0.02, 0.03])
    H = np.array([0.5, -1.0, 2.0])
    s = H @ P @ H + 1e-3
    for r in rng.normal(0, np.sqrt(s), n):
        accepted += mahalanobis_gate(LidarResidual(abs(r), r, H, 1e-3), P)
    assert accepted / n >= 0.95 - 0.03


# ---------------------------------------------------------------- simulated world


def test_noise_free_world_residuals_vanish():
    world = WorldModel.room()
    rig = RigTruth()
    rng = np.random.default_rng(2)
    state = random_state(rng, n_cam=0, n_lidar=2)
    state.lidar_calib = rig.lidar.copy()
    poses = [(random_rotation(rng, 0.3), np.array([1.0, 0.5, 1.5])),
             (random_rotation(rng, 0.3), np.array([1.2, 0.4, 1.45]))]
    scans, frames = [], []
    for clone, (q, p) in zip(state.lidar_clones, poses):
        clone.q, clone.p = q, p
        scans.append(synthesize_lidar_scan(world, q, p, rig, RingGeometry(), 0.0, sigma=0.0))
        frames.append(lidar_pose(q, p, rig.lidar))
    old = extract_features(LidarScan(0.0, scans[0].rings))
    new = extract_features(LidarScan(0.0, scans[1].rings))
    index = FeatureIndex.build(old, FeatureKind.SURF)
    rel = relative_lidar_transform(state, *state.lidar_clones)

    def to_world(x, frame):
        R, o = frame
        return R.T @ x + o

    checked = 0
    for f in new:
        if f.kind is not FeatureKind.SURF:
            continue
        try:
            corr = find_correspondence(rel[0] @ f.position + rel[1], index, 1.0, f.position)
        except NoCorrespondence:
            continue
        pts = [to_world(f.position, frames[1])] + [to_world(a, frames[0]) for a in corr.anchors]
        if not any(all(pl.contains(x, 1e-8) for x in pts) for pl in world.planes):
            continue
        assert residual_jacobian(state, corr, 0, 1).value < 1e-8
        checked += 1
    assert checked > 20
