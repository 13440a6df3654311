import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2

from licfusion.selftest import check_compression, random_state
from licfusion.update import (
    ResidualBlock, UpdateError, chi_squared_gate, chi_squared_quantile, ekf_update, givens_qr, kalman_correction,
    qr_compress, stack_blocks, whiten,
)


def random_block(rng, rows, D):
    return ResidualBlock(rng.normal(size=rows), rng.normal(size=(rows, D)), rng.uniform(0.01, 1.0, rows))


def random_cov(rng, D):
    A = rng.normal(size=(D, D))
    return A @ A.T / D + 1e-3 * np.eye(D)


# ---------------------------------------------------------------- stacking


def test_stack_single_block_is_identity(rng):
    b = random_block(rng, 3, 5)
    assert stack_blocks([b]) is b


def test_stack_preserves_order(rng):
    a, b = random_block(rng, 3, 5), random_block(rng, 5, 5)
    s = stack_blocks([a, b])
    assert s.rows == 8
    assert np.array_equal(s.r, np.r_[a.r, b.r]) and np.array_equal(s.H[3:], b.H)
    assert np.array_equal(s.noise, np.r_[a.noise, b.noise])


def test_stack_is_associative(rng):
    a, b, c = (random_block(rng, n, 4) for n in (2, 3, 4))
    left = stack_blocks([stack_blocks([a, b]), c])
    right = stack_blocks([a, stack_blocks([b, c])])
    assert np.array_equal(left.r, right.r) and np.array_equal(left.H, right.H)
    assert np.array_equal(left.noise, right.noise)


def test_stack_dimension_mismatch(rng):
    with pytest.raises(ValueError):
        stack_blocks([random_block(rng, 2, 4), random_block(rng, 2, 5)])
    with pytest.raises(ValueError):
        stack_blocks([])


def test_block_rejects_nonpositive_noise():
    with pytest.raises(ValueError):
        ResidualBlock(np.zeros(2), np.zeros((2, 3)), np.array([1.0, 0.0]))


# ---------------------------------------------------------------- compression


def test_whitened_triangular_block_is_a_fixed_point(rng):
    D = 6
    T = np.triu(rng.normal(size=(D, D)))
    b = ResidualBlock(rng.normal(size=D), T, np.ones(D))
    out = qr_compress(b)
    assert np.allclose(out.H, b.H, atol=1e-12) and np.allclose(out.r, b.r, atol=1e-12)


def test_compressed_factor_is_upper_triangular(rng):
    for rows, D in ((50, 7), (8, 7), (200, 20)):
        out = qr_compress(random_block(rng, rows, D))
        assert out.rows <= D
        assert np.allclose(np.tril(out.H, -1), 0.0)
        assert np.all(out.noise == 1.0)


def test_givens_matches_numpy_qr(rng):
    H, r = rng.normal(size=(30, 6)), rng.normal(size=30)
    T, rc = givens_qr(H, r)
    Q, R = np.linalg.qr(H)
    signs = np.sign(np.diag(R)) * np.sign(np.diag(T))
    assert np.allclose(T, signs[:, None] * R, atol=1e-12)
    assert np.allclose(rc, signs * (Q.T @ r), atol=1e-12)


def test_normal_equations_preserved(rng):
    b = random_block(rng, 120, 15)
    c = qr_compress(b)
    lhs = c.H.T @ c.H
    rhs = b.H.T @ (b.H / b.noise[:, None])
    assert np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs) < 1e-8
    assert np.linalg.norm(c.H.T @ c.r - b.H.T @ (b.r / b.noise)) / np.linalg.norm(b.H.T @ (b.r / b.noise)) < 1e-8


def test_compressed_posterior_matches_uncompressed():
    result = check_compression(np.random.default_rng(0), 50)
    assert result.max_rel_error < 1e-8


# ---------------------------------------------------------------- EKF update


def test_scalar_kalman_step():
    dx, P = kalman_correction(np.eye(1), ResidualBlock([1.0], [[1.0]], [1.0]))
    assert dx[0] == pytest.approx(0.5) and P[0, 0] == pytest.approx(0.5)


def test_zero_residual_leaves_mean(state, rng):
    H = rng.normal(size=(4, state.dim))
    out = ekf_update(state, ResidualBlock(np.zeros(4), H, np.full(4, 0.1)))
    assert np.allclose(out.imu.p, state.imu.p) and np.allclose(out.imu.q, state.imu.q)
    assert np.trace(out.cov) < np.trace(state.cov)


def test_update_matches_information_form(rng):
    for _ in range(30):
        D, rows = int(rng.integers(2, 20)), int(rng.integers(1, 60))
        P = random_cov(rng, D)
        b = random_block(rng, rows, D)
        dx, P_new = kalman_correction(P, b)
        Ri = np.diag(1.0 / b.noise)
        info = np.linalg.inv(P) + b.H.T @ Ri @ b.H
        P_ref = np.linalg.inv(info)
        assert np.linalg.norm(P_new - P_ref) / np.linalg.norm(P_ref) < 1e-9
        dx_ref = P_ref @ b.H.T @ Ri @ b.r
        assert np.linalg.norm(dx - dx_ref) / np.linalg.norm(dx_ref) < 1e-9


def test_posterior_invariant_to_row_order(rng):
    P = random_cov(rng, 10)
    b = random_block(rng, 40, 10)
    perm = rng.permutation(40)
    shuffled = ResidualBlock(b.r[perm], b.H[perm], b.noise[perm])
    dx1, P1 = kalman_correction(P, b)
    dx2, P2 = kalman_correction(P, shuffled)
    assert np.linalg.norm(dx1 - dx2) / np.linalg.norm(dx1) < 1e-8
    assert np.linalg.norm(P1 - P2) / np.linalg.norm(P1) < 1e-8


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2 ** 31 - 1))
def test_trace_never_grows(rows, seed):
    rng = np.random.default_rng(seed)
    P = random_cov(rng, 8)
    _, P_new = kalman_correction(P, random_block(rng, rows, 8))
    assert np.trace(P_new) <= np.trace(P) + 1e-12


def test_dimension_mismatch_and_singular_innovation(rng):
    s = random_state(rng, 1, 1)
    with pytest.raises(ValueError):
        ekf_update(s, random_block(rng, 3, s.dim + 1))
    s.cov = np.zeros((s.dim, s.dim))
    H = np.zeros((2, s.dim))
    b = ResidualBlock(np.ones(2), H, np.ones(2))
    b.noise[:] = 0.0
    with pytest.raises(UpdateError):
        ekf_update(s, b, compress=False)


# ---------------------------------------------------------------- chi-squared


def test_quantile_values():
    assert chi_squared_quantile(1, 0.95) == pytest.approx(3.8415, abs=1e-3)
    assert chi_squared_quantile(2, 0.95) == pytest.approx(-2 * np.log(0.05), abs=1e-3)
    assert chi_squared_quantile(37, 0.9) == pytest.approx(chi2.ppf(0.9, 37), rel=1e-12)


def test_quantile_is_monotone():
    q = [chi_squared_quantile(d, 0.95) for d in range(1, 200)]
    assert all(b > a for a, b in zip(q, q[1:]))
    c = [chi_squared_quantile(5, x) for x in np.linspace(0.05, 0.99, 30)]
    assert all(b > a for a, b in zip(c, c[1:]))


@pytest.mark.parametrize("dof,conf", [(0, 0.95), (1.5, 0.95), (3, 0.0), (3, 1.0)])
def test_quantile_rejects_bad_arguments(dof, conf):
    with pytest.raises(ValueError):
        chi_squared_quantile(dof, conf)


def test_block_gate(rng):
    P = np.eye(3) * 0.01
    H = rng.normal(size=(4, 3))
    assert chi_squared_gate(np.zeros(4), H, P, 0.01)
    assert not chi_squared_gate(np.full(4, 10.0), H, P, 0.01)


def test_whiten_scales_rows(rng):
    b = random_block(rng, 5, 3)
    w = whiten(b)
    assert np.allclose(w.H * np.sqrt(b.noise)[:, None], b.H) and np.all(w.noise == 1.0)
