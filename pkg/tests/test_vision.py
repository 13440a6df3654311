import numpy as np
import pytest
import scipy.linalg
from scipy.optimize import least_squares

from licfusion.rotation import rot_matrix
from licfusion.selftest import check_visual, random_state, visual_setup
from licfusion.state import CAL_TD, POS, VEL, Sensor
from licfusion.update import ResidualBlock, ekf_update
from licfusion.vision import (
    BehindCamera, CameraModel, FeatureTrack, IllConditioned, RankDeficient, camera_pose, nullspace_project,
    triangulate, visual_residual_jacobians,
)


def exact_track(state, pf, noise=0.0, rng=None):
    track = FeatureTrack(0)
    for c in state.cam_clones:
        R_CG, p_GC = camera_pose(c, state.cam_calib)
        pc = R_CG @ (pf - p_GC)
        z = pc[:2] / pc[2] + (rng.normal(0, noise, 2) if noise else 0.0)
        track.add(c.t, *z)
    return track


def test_camera_model_rejects_bad_focal_length():
    with pytest.raises(ValueError):
        CameraModel(fx=0.0)


def test_normalized_sigma():
    assert CameraModel(fx=400, fy=400).normalized_sigma(1.0) == pytest.approx(1 / 400)


# ---------------------------------------------------------------- triangulation


def test_two_exact_views_recover_point(rng):
    for _ in range(20):
        state, pf, _ = visual_setup(rng, n_views=2)
        assert np.linalg.norm(triangulate(exact_track(state, pf), state) - pf) < 1e-9


def test_zero_baseline_is_ill_conditioned(rng):
    state, pf, _ = visual_setup(rng, n_views=2)
    a, b = state.cam_clones
    b.q, b.p = a.q.copy(), a.p.copy()
    with pytest.raises(IllConditioned):
        triangulate(exact_track(state, pf), state)


def test_single_view_is_ill_conditioned(rng):
    state, pf, _ = visual_setup(rng, n_views=1)
    with pytest.raises(IllConditioned):
        triangulate(exact_track(state, pf), state)


def test_point_behind_cameras(rng):
    state, pf, _ = visual_setup(rng, n_views=3)
    R_CG, p_GC = camera_pose(state.cam_clones[0], state.cam_calib)
    # mirror the point through the first camera: bearings still intersect behind it
    behind = 2 * p_GC - pf
    track = exact_track(state, pf)
    for i, c in enumerate(state.cam_clones):
        R, o = camera_pose(c, state.cam_calib)
        pc = R @ (behind - o)
        track.observations[i] = (c.t, pc[0] / pc[2], pc[1] / pc[2])
    with pytest.raises(BehindCamera):
        triangulate(track, state)


def test_missing_clone_raises(rng):
    state, pf, track = visual_setup(rng, n_views=2)
    track.add(99.0, 0.0, 0.0)
    with pytest.raises(KeyError):
        triangulate(track, state)


def _reprojection(state, track):
    poses = [camera_pose(c, state.cam_calib) for c in state.cam_clones]
    z = np.array([o[1:] for o in track.observations])

    def f(p):
        out = []
        for (R, o), zi in zip(poses, z):
            pc = R @ (p - o)
            out.append(zi - pc[:2] / pc[2])
        return np.concatenate(out)
    return f


def test_many_noisy_views_refine_and_match_reference(rng):
    better = 0
    trials = 30
    for _ in range(trials):
        state, pf, _ = visual_setup(rng, n_views=10)
        track = exact_track(state, pf, noise=2e-3, rng=rng)
        est = triangulate(track, state, iterations=50)
        two = FeatureTrack(0, track.observations[:2])
        lin = triangulate(two, state, iterations=0)
        better += np.linalg.norm(est - pf) < np.linalg.norm(lin - pf)
        ref = least_squares(_reprojection(state, track), est + 0.01, xtol=1e-15, ftol=1e-15, gtol=1e-15).x
        assert np.linalg.norm(est - ref) < 1e-6
    assert better >= 0.8 * trials


def test_gauss_newton_rms_is_monotone(rng):
    for _ in range(20):
        state, pf, _ = visual_setup(rng, n_views=5)
        _, history = triangulate(exact_track(state, pf), state, return_history=True)
        assert all(b <= a for a, b in zip(history, history[1:]))


# ---------------------------------------------------------------- residuals


def test_residual_vanishes_at_truth(rng):
    state, pf, _ = visual_setup(rng)
    r, _, _ = visual_residual_jacobians(exact_track(state, pf), pf, state)
    assert np.abs(r).max() < 1e-10


def test_jacobians_match_finite_differences():
    assert all(c.passed for c in check_visual(np.random.default_rng(9), 100))


def test_jacobian_sparsity(rng):
    state, pf, track = visual_setup(rng)
    _, Hx, Hf = visual_residual_jacobians(track, pf, state)
    assert Hf.shape == (2 * len(track), 3)
    oc = state.calib_offset(Sensor.CAMERA)
    assert np.all(Hx[:, oc + CAL_TD] == 0.0)
    assert np.any(Hx[:, oc:oc + 6] != 0.0)
    assert np.all(Hx[:, :oc] == 0.0)
    ol = state.calib_offset(Sensor.LIDAR)
    assert np.all(Hx[:, ol:ol + 7] == 0.0)
    for j in range(len(state.lidar_clones)):
        o = state.clone_offset(Sensor.LIDAR, j)
        assert np.all(Hx[:, o:o + 6] == 0.0)


# ---------------------------------------------------------------- nullspace projection


def test_projection_annihilates_feature(rng):
    state, pf, track = visual_setup(rng)
    r, Hx, Hf = visual_residual_jacobians(track, pf, state)
    Q, _, _ = scipy.linalg.qr(Hf, pivoting=True)
    assert np.abs(Q[:, 3:].T @ Hf).max() < 1e-10
    ro, Hxo = nullspace_project(r, Hx, Hf)
    assert ro.shape == (2 * len(track) - 3,) and Hxo.shape == (len(ro), state.dim)


def test_two_observations_leave_one_row(rng):
    state, pf, track = visual_setup(rng, n_views=2)
    ro, _ = nullspace_project(*visual_residual_jacobians(track, pf, state))
    assert ro.shape == (1,)


def test_rank_deficient_feature_jacobian(rng):
    Hf = np.zeros((6, 3))
    Hf[:, :2] = rng.normal(size=(6, 2))
    with pytest.raises(RankDeficient):
        nullspace_project(rng.normal(size=6), rng.normal(size=(6, 10)), Hf)


def test_information_is_basis_invariant(rng):
    state, pf, track = visual_setup(rng)
    r, Hx, Hf = visual_residual_jacobians(track, pf, state)
    r = r + rng.normal(0, 1e-3, len(r))
    ro, Hxo = nullspace_project(r, Hx, Hf)
    N = scipy.linalg.null_space(Hf.T)
    a = np.linalg.norm(Hxo.T @ ro)
    b = np.linalg.norm((N.T @ Hx).T @ (N.T @ r))
    assert abs(a - b) < 1e-10 * max(a, 1.0)


def test_projected_update_equals_feature_marginalization():
    rng = np.random.default_rng(21)
    for _ in range(10):
        state = random_state(rng, 3, 1)
        A = rng.normal(size=(state.dim, state.dim))
        state.cov = A @ A.T / state.dim + 0.01 * np.eye(state.dim)
        k = 3
        Hx = rng.normal(size=(2 * k, state.dim))
        Hf = rng.normal(size=(2 * k, 3))
        r = rng.normal(0, 0.1, 2 * k)
        sigma2 = 0.01
        ro, Hxo = nullspace_project(r, Hx, Hf)
        post = ekf_update(state, ResidualBlock(ro, Hxo, np.full(len(ro), sigma2)), compress=False)
        # joint Gaussian over (x, f) with a flat prior on f, then marginalize f (information form)
        Ri = np.eye(2 * k) / sigma2
        W = Ri - Ri @ Hf @ np.linalg.solve(Hf.T @ Ri @ Hf, Hf.T @ Ri)
        info = np.linalg.inv(state.cov) + Hx.T @ W @ Hx
        P = np.linalg.inv(info)
        dx = P @ Hx.T @ W @ r
        assert np.linalg.norm(post.cov - P) / np.linalg.norm(P) < 1e-8
        assert np.allclose(post.imu.p - state.imu.p, dx[POS:POS + 3], rtol=1e-8, atol=1e-12)
        assert np.allclose(post.imu.v - state.imu.v, dx[VEL:VEL + 3], rtol=1e-8, atol=1e-12)


def test_rotation_helper_consistency(rng):
    state, pf, _ = visual_setup(rng, n_views=2)
    R_CG, p_GC = camera_pose(state.cam_clones[0], state.cam_calib)
    assert np.allclose(R_CG, rot_matrix(state.cam_calib.q) @ rot_matrix(state.cam_clones[0].q))
