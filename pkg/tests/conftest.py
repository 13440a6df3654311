import numpy as np
import pytest

from licfusion.selftest import random_state


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def state(rng):
    s = random_state(rng, n_cam=3, n_lidar=2)
    A = rng.normal(size=(s.dim, s.dim))
    s.cov = A @ A.T / s.dim + 1e-3 * np.eye(s.dim)
    return s


def random_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


_ACCEPTANCE = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    def _report(number, name, passed, detail):
        _ACCEPTANCE.append(f"{'PASS' if passed else 'FAIL'}  criterion {number}: {name}  [{detail}]")
        assert passed, detail
    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
