"""Rank-adaptive augmented basis-update & Galerkin (BUG) integrator.

Solves matrix ODEs  du/dt = F(t, u) = F_ex(t, u) - u diag(d(t))  for
u = X S V^T with one IMEX Euler substep per K, L and S equation: the
moment-diagonal part d is implicit, everything else explicit at t0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import SolverError

log = logging.getLogger(__name__)


@dataclass
class LowRankState:
    """u = X S V^T with orthonormal columns in X and V.

    ``S`` may be rectangular after augmentation.  ``sigma`` holds the
    singular values of the augmented core before the last truncation and
    ``capped`` flags that the rank cap was binding.
    """

    X: np.ndarray
    S: np.ndarray
    V: np.ndarray
    sigma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    capped: bool = False

    @property
    def rank(self) -> int:
        return self.S.shape[0]

    @property
    def shape(self):
        return self.X.shape[0], self.V.shape[0]

    @property
    def memory_elements(self) -> int:
        return self.X.size + self.S.size + self.V.size

    def dense(self):
        return self.X @ self.S @ self.V.T

    def orthonormality_error(self):
        ex = np.linalg.norm(self.X.T @ self.X - np.eye(self.X.shape[1]))
        ev = np.linalg.norm(self.V.T @ self.V - np.eye(self.V.shape[1]))
        return ex, ev

    def column(self, j: int):
        """Column j of u (one moment over all cells) without forming u."""
        return self.X @ (self.S @ self.V[j])

    @classmethod
    def from_dense(cls, u, rank=None):
        P, s, Qt = np.linalg.svd(u, full_matrices=False)
        r = rank or max(1, int(np.sum(s > 0)))
        return cls(P[:, :r], np.diag(s[:r]), Qt[:r].T)

    @classmethod
    def zero(cls, x_dir, v_dir, rank: int = 1):
        """Zero matrix at the given rank; leading basis columns follow
        ``x_dir`` and ``v_dir``, completed deterministically."""
        X = _orth_completion(np.asarray(x_dir, dtype=float), rank)
        V = _orth_completion(np.asarray(v_dir, dtype=float), rank)
        return cls(X, np.zeros((rank, rank)), V)


def _orth_completion(v, r):
    n = v.size
    if r > n:
        raise ValueError(f"rank {r} exceeds dimension {n}")
    nv = np.linalg.norm(v)
    lead = v / nv if nv > 0 else np.eye(n, 1)[:, 0]
    # Householder Q is orthonormal even when the stacked columns are dependent
    Q, _ = np.linalg.qr(np.column_stack([lead, np.eye(n, r)]))
    Q = Q[:, :r]
    if Q[:, 0] @ lead < 0:
        Q[:, 0] *= -1.0
    return Q


class RhsSplit:
    """Right-hand side F = F_ex - u diag(d) in factored form.

    Subclasses provide ``dense_explicit``, ``stiff_diag`` and ``shape``;
    the K, L and S actions default to dense evaluation and should be
    overridden with factored versions where it matters.
    """

    shape: tuple

    def dense_explicit(self, t, u):
        raise NotImplementedError

    def stiff_diag(self, t):
        raise NotImplementedError

    def dense(self, t, u):
        return self.dense_explicit(t, u) - u * self.stiff_diag(t)

    def explicit_K(self, t, K, V):
        """F_ex(t, K V^T) V."""
        return self.dense_explicit(t, K @ V.T) @ V

    def explicit_L(self, t, X, L):
        """F_ex(t, X L^T)^T X."""
        return self.dense_explicit(t, X @ L.T).T @ X

    def explicit_S(self, t, X, S, V):
        """X^T F_ex(t, X S V^T) V."""
        return X.T @ self.dense_explicit(t, X @ S @ V.T) @ V


class DenseRhs(RhsSplit):
    """RhsSplit built from callables; convenient for tests and small problems."""

    def __init__(self, explicit, stiff_diag, shape):
        self._explicit = explicit
        self._stiff = stiff_diag
        self.shape = tuple(shape)

    def dense_explicit(self, t, u):
        return self._explicit(t, u)

    def stiff_diag(self, t):
        return np.asarray(self._stiff(t), dtype=float)


@dataclass
class BugConfig:
    theta: float = 1e-2
    theta_mode: str = "rel"
    r_max: int = 100
    r0: int = 1
    cfl: float = 0.25
    r_min: int = 1

    def __post_init__(self):
        if self.theta < 0:
            raise ValueError("truncation tolerance must be >= 0")
        if self.theta_mode not in ("abs", "rel"):
            raise ValueError("theta_mode must be 'abs' or 'rel'")
        if not 1 <= self.r0 <= self.r_max:
            raise ValueError("need 1 <= r0 <= r_max")
        if not 1 <= self.r_min <= self.r_max:
            raise ValueError("need 1 <= r_min <= r_max")
        if self.cfl <= 0:
            raise ValueError("CFL factor must be positive")

    def tolerance(self, S) -> float:
        if self.theta_mode == "rel":
            return self.theta * float(np.linalg.norm(S))
        return self.theta


def truncation_rank(sigma, theta: float, r_max: int = None) -> int:
    """Smallest r with sqrt(sum_{j>r} sigma_j^2) <= theta, floored at 1."""
    sigma = np.asarray(sigma, dtype=float)
    # tail[r] = norm of sigma[r:]
    tail = np.sqrt(np.cumsum((sigma**2)[::-1])[::-1])
    tail = np.append(tail, 0.0)
    ok = np.nonzero(tail <= theta)[0]
    r = int(ok[0]) if ok.size else sigma.size
    r = max(r, 1)
    if r_max is not None:
        r = min(r, r_max)
    return r


def truncate(X, S, V, theta: float, r_max: int = None, r_min: int = 1) -> LowRankState:
    """SVD truncation of the augmented core with absolute tolerance theta.

    ``r_min`` keeps at least that many directions (clipped to the core size)
    even when trailing singular values are exactly zero.
    """
    P, sigma, Qt = np.linalg.svd(S, full_matrices=False)
    r_free = max(truncation_rank(sigma, theta), min(r_min, sigma.size))
    r = r_free if r_max is None else min(r_free, r_max)
    capped = r_max is not None and r_free > r_max
    if capped:
        log.warning("rank cap %d reached (tolerance asks for %d)", r_max, r_free)
    return LowRankState(X @ P[:, :r], np.diag(sigma[:r]), V @ Qt[:r].T, sigma=sigma, capped=capped)


def _solve_right(B, M):
    """B M^{-1} for a small square M."""
    cond = np.linalg.cond(M)
    if not cond < 1e12:
        raise SolverError(f"singular implicit system in BUG substep (condition number {cond:.3e})")
    try:
        return np.linalg.solve(M.T, B.T).T
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"singular implicit system in BUG substep: {exc}") from exc


def _augment(new, old):
    Q, _ = np.linalg.qr(np.column_stack([new, old]))
    return Q


def bug_step(state: LowRankState, rhs: RhsSplit, t0: float, dt: float, config: BugConfig) -> LowRankState:
    """One rank-adaptive augmented BUG step from t0 to t0 + dt."""
    if dt <= 0:
        raise ValueError("step size must be positive")
    X0, S0, V0 = state.X, state.S, state.V
    t1 = t0 + dt
    d1 = rhs.stiff_diag(t1)
    diag = 1.0 + dt * d1
    bad = np.nonzero(np.abs(diag) < 1e-12)[0]
    if bad.size:
        raise SolverError(f"singular implicit system: 1 + dt*d vanishes for moment index {int(bad[0])}")

    # K-step
    K0 = X0 @ S0
    rhsK = K0 + dt * rhs.explicit_K(t0, K0, V0)
    K1 = _solve_right(rhsK, np.eye(V0.shape[1]) + dt * (V0.T * d1) @ V0)

    # L-step: the implicit part is diagonal
    L0 = V0 @ S0.T
    L1 = (L0 + dt * rhs.explicit_L(t0, X0, L0)) / diag[:, None]

    Xh = _augment(K1, X0)
    Vh = _augment(L1, V0)

    # S-step (Galerkin)
    Sh0 = (Xh.T @ X0) @ S0 @ (V0.T @ Vh)
    rhsS = Sh0 + dt * rhs.explicit_S(t0, Xh, Sh0, Vh)
    Sh1 = _solve_right(rhsS, np.eye(Vh.shape[1]) + dt * (Vh.T * d1) @ Vh)
    if not np.all(np.isfinite(Sh1)):
        raise SolverError("non-finite coefficients in BUG step")

    return truncate(Xh, Sh1, Vh, config.tolerance(Sh1), config.r_max, config.r_min)


def imex_euler_dense(u, rhs: RhsSplit, t0: float, dt: float):
    """Dense IMEX Euler step matching the substep scheme of ``bug_step``."""
    return (u + dt * rhs.dense_explicit(t0, u)) / (1.0 + dt * rhs.stiff_diag(t0 + dt))
