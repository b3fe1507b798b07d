import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from protondlra.dlra import (
    BugConfig,
    DenseRhs,
    LowRankState,
    bug_step,
    imex_euler_dense,
    truncate,
    truncation_rank,
)
from protondlra.exceptions import SolverError


def _random_state(rng, n, m, r, decay=1.0):
    X, _ = np.linalg.qr(rng.normal(size=(n, r)))
    V, _ = np.linalg.qr(rng.normal(size=(m, r)))
    S = np.diag(decay ** np.arange(r)) @ rng.normal(size=(r, r))
    return LowRankState(X, S, V)


def _linear_rhs(rng, n, m, stiff=(0.0, 50.0)):
    """F(u) = A u + u B - u diag(d) with d stiff."""
    A = rng.normal(size=(n, n)) / np.sqrt(n)
    B = rng.normal(size=(m, m)) / np.sqrt(m)
    d = rng.uniform(*stiff, m)
    return DenseRhs(lambda t, u: A @ u + u @ B, lambda t: d, (n, m)), A, B, d


# --- truncation ---------------------------------------------------------------------


def test_truncation_examples():
    sig = np.array([3.0, 2.0, 1e-8, 1e-9])
    assert truncation_rank(sig, 1e-6) == 2
    assert np.sqrt(np.sum(sig[2:] ** 2)) == pytest.approx(1e-8 * np.sqrt(1 + 1e-2), rel=1e-12)
    assert truncation_rank(np.array([3.0, 2.0, 1.0, 0.0]), 0.0) == 3
    assert truncation_rank(np.array([1.0]), 10.0) == 1
    assert truncation_rank(np.array([5.0, 4.0]), 0.0, r_max=1) == 1


@settings(max_examples=200, deadline=None)
@given(
    st.integers(1, 12),
    st.integers(1, 12),
    st.floats(1e-6, 10.0),
    st.integers(0, 2**31 - 1),
)
def test_truncation_tail_and_minimality(p, q, theta, seed):
    S = np.random.default_rng(seed).normal(size=(p, q))
    P, sig, Qt = np.linalg.svd(S)
    r = truncation_rank(sig, theta)
    tail = np.sqrt(np.sum(sig[r:] ** 2))
    assert tail <= theta
    if r > 1:
        assert np.sqrt(np.sum(sig[r - 1 :] ** 2)) > theta


def test_truncate_returns_orthonormal_bases(rng):
    X, _ = np.linalg.qr(rng.normal(size=(30, 6)))
    V, _ = np.linalg.qr(rng.normal(size=(12, 5)))
    S = rng.normal(size=(6, 5))
    st_ = truncate(X, S, V, theta=0.5)
    ex, ev = st_.orthonormality_error()
    assert ex < 1e-12 and ev < 1e-12
    assert np.linalg.norm(st_.dense() - X @ S @ V.T) <= 0.5 + 1e-12


def test_truncate_cap_flag(rng, caplog):
    X, _ = np.linalg.qr(rng.normal(size=(10, 4)))
    V, _ = np.linalg.qr(rng.normal(size=(8, 4)))
    S = np.diag([4.0, 3.0, 2.0, 1.0])
    st_ = truncate(X, S, V, theta=0.0, r_max=2)
    assert st_.capped and st_.rank == 2
    assert "rank cap" in caplog.text


def test_config_validation():
    with pytest.raises(ValueError):
        BugConfig(theta=-1)
    with pytest.raises(ValueError):
        BugConfig(theta_mode="weird")
    with pytest.raises(ValueError):
        BugConfig(r0=5, r_max=3)
    assert BugConfig(theta=0.1, theta_mode="rel").tolerance(np.eye(4)) == pytest.approx(0.2)
    assert BugConfig(theta=0.1, theta_mode="abs").tolerance(np.eye(4)) == 0.1


# --- state ------------------------------------------------------------------------------


def test_state_memory_and_dense(rng):
    s = _random_state(rng, 20, 9, 3)
    assert s.memory_elements == 3 * (20 + 9) + 9
    np.testing.assert_allclose(s.column(4), s.dense()[:, 4])
    back = LowRankState.from_dense(s.dense(), 3)
    np.testing.assert_allclose(back.dense(), s.dense(), atol=1e-12)


def test_zero_state_directions(rng):
    x = rng.normal(size=15)
    v = rng.normal(size=6)
    s = LowRankState.zero(x, v, 4)
    assert s.X[:, 0] @ x == pytest.approx(np.linalg.norm(x))
    assert s.V[:, 0] @ v == pytest.approx(np.linalg.norm(v))
    ex, ev = s.orthonormality_error()
    assert ex < 1e-13 and ev < 1e-13
    assert np.all(s.dense() == 0)


# --- BUG step -----------------------------------------------------------------------------


def test_zero_dynamics_preserve_matrix(rng):
    s = _random_state(rng, 25, 10, 3)
    rhs = DenseRhs(lambda t, u: np.zeros_like(u), lambda t: np.zeros(10), (25, 10))
    out = bug_step(s, rhs, 0.0, 0.1, BugConfig(theta=1e-12, theta_mode="abs"))
    assert np.linalg.norm(out.dense() - s.dense()) <= 1e-10


def test_pure_damping_matches_dense(rng):
    s = _random_state(rng, 25, 10, 3)
    d = rng.uniform(0, 20, 10)
    rhs = DenseRhs(lambda t, u: np.zeros_like(u), lambda t: d, (25, 10))
    out = bug_step(s, rhs, 0.0, 0.05, BugConfig(theta=0.0, r_max=20))
    ref = imex_euler_dense(s.dense(), rhs, 0.0, 0.05)
    np.testing.assert_allclose(out.dense(), ref, atol=1e-12)


def test_full_rank_step_equals_dense_imex(rng):
    n, m = 12, 6
    rhs, *_ = _linear_rhs(rng, n, m)
    s = _random_state(rng, n, m, m)
    out = bug_step(s, rhs, 0.0, 0.01, BugConfig(theta=0.0, r_max=m))
    np.testing.assert_allclose(out.dense(), imex_euler_dense(s.dense(), rhs, 0.0, 0.01), atol=1e-12)


def test_rank_growth_bound_and_orthonormality(rng):
    n, m = 40, 16
    rhs, *_ = _linear_rhs(rng, n, m)
    s = _random_state(rng, n, m, 3)
    for k in range(10):
        r = s.rank
        s = bug_step(s, rhs, k * 0.01, 0.01, BugConfig(theta=0.0, theta_mode="abs", r_max=7))
        assert s.rank <= min(2 * r, 7)
        ex, ev = s.orthonormality_error()
        assert max(ex, ev) <= 1e-10


def test_singular_implicit_system_reported(rng):
    s = _random_state(rng, 8, 4, 2)
    rhs = DenseRhs(lambda t, u: np.zeros_like(u), lambda t: np.full(4, -10.0), (8, 4))
    with pytest.raises(SolverError, match="singular"):
        bug_step(s, rhs, 0.0, 0.1, BugConfig())


def test_first_order_convergence(rng):
    """Global error at T against the exact solution of a linear matrix ODE."""
    n, m, T = 20, 8, 0.5
    A = rng.normal(size=(n, n)) / np.sqrt(n)
    B = rng.normal(size=(m, m)) / np.sqrt(m)
    B = 0.5 * (B - B.T)  # transport-like, non-stiff
    d = np.linspace(0.0, 40.0, m)  # stiff damping
    rhs = DenseRhs(lambda t, u: A @ u + u @ B, lambda t: d, (n, m))
    s0 = _random_state(rng, n, m, 2)
    # vec(u)' = (I (x) A + (B - D)^T (x) I) vec(u), column-major vec
    Lop = np.kron(np.eye(m), A) + np.kron((B - np.diag(d)).T, np.eye(n))
    exact = (expm(T * Lop) @ s0.dense().ravel(order="F")).reshape((n, m), order="F")
    errs, steps = [], [20, 40, 80, 160, 320]
    for k in steps:
        s = s0
        for j in range(k):
            s = bug_step(s, rhs, j * T / k, T / k, BugConfig(theta=1e-12, theta_mode="abs", r_max=m))
        errs.append(np.linalg.norm(s.dense() - exact))
    slope = -np.polyfit(np.log(steps), np.log(errs), 1)[0]
    assert 0.8 <= slope <= 1.2


def test_rank_floor_keeps_zero_directions(rng):
    X, _ = np.linalg.qr(rng.normal(size=(10, 4)))
    V, _ = np.linalg.qr(rng.normal(size=(8, 4)))
    S = np.diag([2.0, 1.0, 0.0, 0.0])
    assert truncate(X, S, V, theta=0.0).rank == 2
    kept = truncate(X, S, V, theta=0.0, r_min=4)
    assert kept.rank == 4
    np.testing.assert_allclose(kept.dense(), X @ S @ V.T, atol=1e-14)
    assert truncate(X, S, V, theta=0.0, r_min=9).rank == 4
    with pytest.raises(ValueError):
        BugConfig(r_min=0)
