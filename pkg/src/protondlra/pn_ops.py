"""Spherical-harmonic moment operators and the finite-volume advection stencil.

Moment vectors are ordered (l, m) = (0,0), (1,-1), (1,0), (1,1), ..., (N,N)
with real, orthonormal harmonics (no Condon-Shortley phase).  Fields are
stored as arrays of shape (n_cells, k) with cells flattened in C order of
``[ix, iy, iz]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import legendre as npleg

from .domain import DensityGrid, Grid3
from .exceptions import AssemblyError

FOUR_PI = 4.0 * np.pi


def n_moments(N: int) -> int:
    return (N + 1) ** 2


def _normalized_alp(N, mu):
    """Orthonormal associated Legendre functions Pbar[l, m] (m >= 0).

    Pbar_l^m(mu) = sqrt((2l+1)/(4 pi) (l-m)!/(l+m)!) P_l^m(mu), so that
    Pbar_l^0 * (sqrt(2) cos(m phi) for m > 0) is orthonormal on the sphere.
    """
    mu = np.asarray(mu, dtype=float)
    s = np.sqrt(np.clip(1.0 - mu * mu, 0.0, None))
    P = np.zeros((N + 1, N + 1) + mu.shape)
    P[0, 0] = 1.0 / np.sqrt(FOUR_PI)
    for m in range(1, N + 1):
        P[m, m] = np.sqrt((2 * m + 1) / (2.0 * m)) * s * P[m - 1, m - 1]
    for m in range(0, N):
        P[m + 1, m] = np.sqrt(2 * m + 3.0) * mu * P[m, m]
    for m in range(0, N + 1):
        for l in range(m + 2, N + 1):
            a = np.sqrt((4.0 * l * l - 1) / (l * l - m * m))
            b = np.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1) ** 2 - 1))
            P[l, m] = a * (mu * P[l - 1, m] - b * P[l - 2, m])
    return P


def _azimuthal(m, phi):
    if m > 0:
        return np.sqrt(2.0) * np.cos(m * phi)
    if m < 0:
        return np.sqrt(2.0) * np.sin(-m * phi)
    return np.ones_like(phi)


@dataclass(frozen=True)
class SHBasis:
    """Real spherical harmonics up to degree N."""

    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 0:
            raise ValueError("P_N degree must be a non-negative integer")

    @property
    def size(self) -> int:
        return n_moments(self.N)

    @property
    def degrees(self):
        return np.repeat(np.arange(self.N + 1), 2 * np.arange(self.N + 1) + 1)

    @property
    def orders(self):
        return np.concatenate([np.arange(-l, l + 1) for l in range(self.N + 1)])

    def index(self, l: int, m: int) -> int:
        if not (0 <= l <= self.N and -l <= m <= l):
            raise IndexError(f"(l, m) = ({l}, {m}) not in P_{self.N}")
        return l * l + l + m

    def evaluate(self, omega):
        """Harmonics at unit vectors ``omega`` (shape (k, 3)) -> (k, n_m)."""
        omega = np.atleast_2d(np.asarray(omega, dtype=float))
        mu = np.clip(omega[:, 2], -1.0, 1.0)
        phi = np.arctan2(omega[:, 1], omega[:, 0])
        return self._evaluate(mu, phi)

    def _evaluate(self, mu, phi):
        P = _normalized_alp(self.N, mu)
        out = np.empty((mu.size, self.size))
        for l, m in zip(self.degrees, self.orders):
            out[:, l * l + l + m] = P[l, abs(m)] * _azimuthal(m, phi)
        return out

    def quadrature(self, exactness: int):
        """Product rule (Gauss-Legendre in mu, trapezoid in phi) integrating
        spherical polynomials of total degree ``exactness`` exactly."""
        n_mu = exactness // 2 + 1
        n_phi = exactness + 2
        mu, wmu = npleg.leggauss(n_mu)
        phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
        M, F = np.meshgrid(mu, phi, indexing="ij")
        w = np.outer(wmu, np.full(n_phi, 2.0 * np.pi / n_phi)).ravel()
        s = np.sqrt(1.0 - M * M)
        omega = np.stack([s * np.cos(F), s * np.sin(F), M], axis=-1).reshape(-1, 3)
        return omega, w


def build_basis(N: int) -> SHBasis:
    return SHBasis(int(N))


def beam_moments(basis: SHBasis, direction) -> np.ndarray:
    """Modal image m(Omega_in) of a delta in angle."""
    d = np.asarray(direction, dtype=float)
    return basis.evaluate(d / np.linalg.norm(d))[0]


@dataclass(frozen=True)
class FluxMatrices:
    """A_i = int m m^T Omega_i dOmega with their sign-split parts."""

    A: tuple
    plus: tuple
    minus: tuple
    eigvals: tuple

    @property
    def size(self) -> int:
        return self.A[0].shape[0]

    def absolute(self, axis: int):
        return self.plus[axis] - self.minus[axis]


def build_flux_matrices(basis: SHBasis, tol: float = 1e-10) -> FluxMatrices:
    """Assemble A_1, A_2, A_3 by product quadrature and factorize them.

    The quadrature is separable: Gauss-Legendre in mu for the associated
    Legendre products and the trapezoid rule in phi for the azimuthal
    factors, both exact for degree 2N+2.
    """
    N = basis.N
    n_mu = N + 2
    n_phi = 2 * N + 4
    mu, wmu = npleg.leggauss(n_mu)
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    wphi = 2.0 * np.pi / n_phi
    P = _normalized_alp(N, mu)
    l_of, m_of = basis.degrees, basis.orders
    Pcol = P[l_of, np.abs(m_of)]  # (n_m, n_mu)
    T = np.array([_azimuthal(m, phi) for m in range(-N, N + 1)])  # (2N+1, n_phi)
    s = np.sqrt(1.0 - mu * mu)
    mat = []
    for g_mu, f_phi in ((s, np.cos(phi)), (s, np.sin(phi)), (mu, np.ones_like(phi))):
        Imu = (Pcol * (wmu * g_mu)) @ Pcol.T
        Iphi = (T * (wphi * f_phi)) @ T.T
        A = Imu * Iphi[np.ix_(m_of + N, m_of + N)]
        asym = np.linalg.norm(A - A.T)
        if asym > tol:
            raise AssemblyError(f"flux matrix not symmetric under quadrature: {asym:.3e}")
        A = 0.5 * (A + A.T)
        A[np.abs(A) < 1e-15] = 0.0
        mat.append(A)
    plus, minus, eigs = [], [], []
    for A in mat:
        lam, Q = np.linalg.eigh(A)
        plus.append((Q * np.maximum(lam, 0.0)) @ Q.T)
        minus.append((Q * np.minimum(lam, 0.0)) @ Q.T)
        eigs.append(lam)
    return FluxMatrices(tuple(mat), tuple(plus), tuple(minus), tuple(eigs))


@dataclass
class ScatterOperator:
    """Moment-diagonal scattering at a set of pseudo-time nodes.

    ``sigma_t`` has shape (n_t,), ``G`` has shape (n_t, N+1) (Legendre
    moments per degree).  ``diagonal(k)`` expands G over the (l, m) order.
    """

    basis: SHBasis
    t: np.ndarray
    sigma_t: np.ndarray
    G: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.sigma_t = np.asarray(self.sigma_t, dtype=float)
        self.G = np.asarray(self.G, dtype=float)
        if self.G.shape != (self.t.size, self.basis.N + 1):
            raise ValueError("G must have shape (n_t, N+1)")

    def g_diagonal(self, k: int):
        return self.G[k][self.basis.degrees]

    def damping(self, k: int):
        """Sigma_t - G_ll per moment; the stiff decay rates."""
        return self.sigma_t[k] - self.g_diagonal(k)


def apply_scatter(field, op: ScatterOperator, k: int):
    """(-Sigma_t I + G) u at pseudo-time node k, pointwise in space.

    In transformed variables the density cancels from the collision terms,
    so no rho factor appears here.
    """
    return -np.asarray(field) * op.damping(k)


# ---------------------------------------------------------------------------
# Finite volumes
# ---------------------------------------------------------------------------


def _reconstruct(W, axis):
    """Face states of a second-order upwind reconstruction along ``axis``.

    ``W`` has shape (nx, ny, nz, k).  Returns (WL, WR), each with n+1 faces
    along ``axis``: WL is the state reconstructed from the low side, WR from
    the high side.  Ghost cells are zero; stencils that would reach beyond
    the ghost layer fall back to first order.
    """
    W = np.moveaxis(W, axis, 0)
    n = W.shape[0]
    zero = np.zeros((1,) + W.shape[1:])
    WL = np.concatenate([zero, W], axis=0)  # face j+1/2 <- cell j (face 0 is ghost)
    WR = np.concatenate([W, zero], axis=0)  # face j-1/2 <- cell j
    if n >= 2:
        WL[2:] += 0.5 * (W[1:] - W[:-1])
        WR[:-2] -= 0.5 * (W[1:] - W[:-1])
    return np.moveaxis(WL, 0, axis), np.moveaxis(WR, 0, axis)


class UpwindStencil:
    """Second-order flux-split differences on a grid.

    ``differences(W, axis)`` returns (D_minus W, D_plus W), the divergence of
    the face states reconstructed from the low (upwind for positive speeds)
    and high side respectively.  With these, the advection term is

        -sum_i  D_minus_i(W) A_i^+  +  D_plus_i(W) A_i^-.
    """

    def __init__(self, grid: Grid3):
        self.grid = grid

    def differences(self, W, axis):
        k = W.shape[-1]
        Wg = W.reshape(self.grid.shape + (k,))
        WL, WR = _reconstruct(Wg, axis)
        h = self.grid.spacing[axis]
        n = self.grid.shape[axis]
        sl_hi = [slice(None)] * 4
        sl_lo = [slice(None)] * 4
        sl_hi[axis] = slice(1, n + 1)
        sl_lo[axis] = slice(0, n)
        Dm = (WL[tuple(sl_hi)] - WL[tuple(sl_lo)]) / h
        Dp = (WR[tuple(sl_hi)] - WR[tuple(sl_lo)]) / h
        return Dm.reshape(-1, k), Dp.reshape(-1, k)

    def boundary_faces(self, W, axis):
        """Outward face states on the low and high domain faces of ``axis``:
        (W on low faces, W on high faces), each of shape (n_face_cells, k)."""
        k = W.shape[-1]
        Wg = W.reshape(self.grid.shape + (k,))
        WL, WR = _reconstruct(Wg, axis)
        lo = np.take(WR, 0, axis=axis).reshape(-1, k)
        hi = np.take(WL, self.grid.shape[axis], axis=axis).reshape(-1, k)
        return lo, hi


def apply_upwind_divergence(field, density: DensityGrid, matrices: FluxMatrices, stencil=None):
    """-A . grad(u / rho) with per-axis flux splitting and zero inflow."""
    stencil = stencil or UpwindStencil(density.grid)
    W = np.asarray(field) / density.flat[:, None]
    out = np.zeros_like(W)
    for i in range(3):
        Dm, Dp = stencil.differences(W, i)
        out -= Dm @ matrices.plus[i] + Dp @ matrices.minus[i]
    return out


def boundary_outflow(field, density: DensityGrid, matrices: FluxMatrices, stencil=None):
    """Particle current leaving through the domain boundary per unit
    pseudo-time: sqrt(4 pi) times the zeroth moment of the upwind face
    fluxes, summed over all boundary faces and weighted by face area."""
    stencil = stencil or UpwindStencil(density.grid)
    W = np.asarray(field) / density.flat[:, None]
    total = 0.0
    for i in range(3):
        lo, hi = stencil.boundary_faces(W, i)
        area = density.grid.face_area(i)
        # outward normal -e_i on the low face, +e_i on the high face
        total += area * (np.sum(hi @ matrices.plus[i][:, 0]) - np.sum(lo @ matrices.minus[i][:, 0]))
    return np.sqrt(FOUR_PI) * total
