"""Energy-dependent water data: stopping power, straggling, Coulomb scattering.

All tables are expressed for water at unit density; spatial density scaling is
applied by the transport code at the point of use.  Energies are in MeV,
stopping powers in MeV cm^2/g, straggling coefficients in MeV^2 cm^2/g and
scattering cross sections in cm^2/g (per steradian for the differential
kernel).
"""

from __future__ import annotations

import io
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Optional

import numpy as np

from .exceptions import AccuracyError, DomainError, TableParseError

# CODATA 2018 / PDG values.
PROTON_MASS = 938.27208816  # MeV
ELECTRON_MASS = 0.51099895  # MeV
FINE_STRUCTURE = 1.0 / 137.035999084
HBAR_C = 1.973269804e-11  # MeV cm
E_SQUARED = FINE_STRUCTURE * HBAR_C  # MeV cm
BOHR_RADIUS = 0.529177210903e-8  # cm
AVOGADRO = 6.02214076e23
BETHE_K = 0.307075  # MeV cm^2 / mol

WATER_MOLAR_MASS = 18.015  # g/mol
WATER_Z_OVER_A = 10.0 / WATER_MOLAR_MASS
WATER_MEAN_EXCITATION = 75.0e-6  # MeV
# (atomic number, atoms per molecule)
WATER_ATOMS = ((1, 2), (8, 1))

_SPLIT = re.compile(r"[,\s]+")


def _kinematics(E):
    """Return (beta^2, gamma, p*c) for a proton of kinetic energy E [MeV]."""
    E = np.asarray(E, dtype=float)
    total = E + PROTON_MASS
    gamma = total / PROTON_MASS
    pc = np.sqrt(E * (E + 2.0 * PROTON_MASS))
    beta2 = (pc / total) ** 2
    return beta2, gamma, pc


# ---------------------------------------------------------------------------
# Tabulated data
# ---------------------------------------------------------------------------


def read_table(source, value_column: int = 1):
    """Parse a whitespace- or comma-separated numeric table.

    Lines starting with ``#`` and blank lines are skipped.  ``source`` may be a
    path, an open text stream, or a string holding the table itself.

    Returns
    -------
    energies, values : ndarray
    """
    if hasattr(source, "read"):
        text = source.read()
    elif isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
    elif isinstance(source, str) and "\n" in source:
        text = source
    else:
        raise FileNotFoundError(f"no such table file: {source!r}")

    energies, values = [], []
    for lineno, raw in enumerate(io.StringIO(text), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f for f in _SPLIT.split(line) if f]
        if len(fields) <= value_column:
            raise TableParseError(
                f"expected at least {value_column + 1} columns, got {len(fields)}", lineno
            )
        try:
            e = float(fields[0])
            v = float(fields[value_column])
        except ValueError:
            raise TableParseError(f"non-numeric entry in {line!r}", lineno) from None
        if not (np.isfinite(e) and np.isfinite(v)):
            raise TableParseError(f"non-finite entry in {line!r}", lineno)
        energies.append(e)
        values.append(v)
    if not energies:
        raise TableParseError("table contains no data rows")
    return np.array(energies), np.array(values)


def _check_ascending(energies):
    if energies.ndim != 1 or energies.size < 2:
        raise ValueError("a table needs at least two energies")
    bad = np.nonzero(np.diff(energies) <= 0)[0]
    if bad.size:
        i = int(bad[0])
        raise ValueError(
            f"energies must be strictly increasing (row {i + 1}: {energies[i]} -> {energies[i + 1]})"
        )


@dataclass(frozen=True)
class StoppingPowerTable:
    """Mass stopping power of water, interpolated log-log between nodes."""

    energies: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=float)
        v = np.asarray(self.values, dtype=float)
        _check_ascending(e)
        if e.shape != v.shape:
            raise ValueError("energies and values differ in length")
        if np.any(e <= 0) or np.any(v <= 0):
            raise ValueError("stopping-power tables need positive energies and values")
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "_loge", np.log(e))
        object.__setattr__(self, "_logv", np.log(v))

    @property
    def e_min(self) -> float:
        return float(self.energies[0])

    @property
    def e_max(self) -> float:
        return float(self.energies[-1])

    def __call__(self, E):
        E = np.asarray(E, dtype=float)
        lo, hi = self.energies[0], self.energies[-1]
        if np.any(E < lo * (1 - 1e-12)) or np.any(E > hi * (1 + 1e-12)):
            raise DomainError(f"energy outside stopping-power table [{lo}, {hi}] MeV")
        return np.exp(np.interp(np.log(np.clip(E, lo, hi)), self._loge, self._logv))


@dataclass(frozen=True)
class StragglingTable:
    """Straggling coefficient of water, interpolated linearly between nodes."""

    energies: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=float)
        v = np.asarray(self.values, dtype=float)
        _check_ascending(e)
        if e.shape != v.shape:
            raise ValueError("energies and values differ in length")
        if np.any(v < 0):
            raise ValueError("straggling coefficients must be non-negative")
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "values", v)

    @property
    def e_min(self) -> float:
        return float(self.energies[0])

    @property
    def e_max(self) -> float:
        return float(self.energies[-1])

    def __call__(self, E):
        E = np.asarray(E, dtype=float)
        lo, hi = self.energies[0], self.energies[-1]
        if np.any(E < lo * (1 - 1e-12)) or np.any(E > hi * (1 + 1e-12)):
            raise DomainError(f"energy outside straggling table [{lo}, {hi}] MeV")
        return np.interp(E, self.energies, self.values)


def load_stopping_power(source) -> StoppingPowerTable:
    energies, values = read_table(source)
    return StoppingPowerTable(energies, values)


def load_straggling(source) -> StragglingTable:
    energies, values = read_table(source)
    return StragglingTable(energies, values)


def default_stopping_power() -> StoppingPowerTable:
    """Bundled water table (0.1-300 MeV), see ``data/water_stopping_power.txt``."""
    ref = resources.files("protondlra") / "data" / "water_stopping_power.txt"
    with ref.open("r", encoding="utf-8") as fh:
        return load_stopping_power(fh)


def bethe_stopping_power(E, mean_excitation: float = WATER_MEAN_EXCITATION):
    """Bethe electronic mass stopping power of water without shell or density
    corrections.  Adequate above ~0.1 MeV."""
    beta2, gamma, _ = _kinematics(E)
    bg2 = beta2 * gamma**2
    ratio = ELECTRON_MASS / PROTON_MASS
    w_max = 2 * ELECTRON_MASS * bg2 / (1 + 2 * gamma * ratio + ratio**2)
    log_term = 0.5 * np.log(2 * ELECTRON_MASS * bg2 * w_max / mean_excitation**2)
    return BETHE_K * WATER_Z_OVER_A / beta2 * (log_term - beta2)


def bohr_straggling(E):
    """Relativistic Bohr energy-loss straggling coefficient of water.

    Variance of energy loss per unit mass thickness [MeV^2 cm^2/g].
    """
    beta2, _, _ = _kinematics(E)
    return BETHE_K * ELECTRON_MASS * WATER_Z_OVER_A * (1 - 0.5 * beta2) / (1 - beta2)


# ---------------------------------------------------------------------------
# Pseudo-time
# ---------------------------------------------------------------------------

_GL10 = np.polynomial.legendre.leggauss(10)


def _gl_integral(f, a, b):
    """Vectorised 10-point Gauss-Legendre integral of f over [a, b] (arrays)."""
    x, w = _GL10
    a = np.asarray(a, dtype=float)[..., None]
    b = np.asarray(b, dtype=float)[..., None]
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    return np.sum(w * f(mid + half * x), axis=-1) * half[..., 0]


class PseudoTimeMap:
    """Bijection between energy and pseudo-time t(E) = int_E^Emax dE'/S(E').

    The cumulative integral is tabulated with composite Gauss-Legendre
    quadrature on a refined mesh; intermediate values integrate the partial
    panel exactly at the query point.  The inverse is polished with Newton
    iterations, using dt/dE = -1/S.
    """

    def __init__(
        self,
        stopping: Callable,
        e_cutoff: float,
        e_max: float,
        n_nodes: int = 2000,
        breakpoints=None,
    ):
        if not e_max > e_cutoff:
            raise ValueError("e_max must exceed e_cutoff")
        self.stopping = stopping
        self.e_cutoff = float(e_cutoff)
        self.e_max = float(e_max)
        if e_cutoff > 0:
            nodes = np.geomspace(e_cutoff, e_max, n_nodes)
        else:
            nodes = np.linspace(e_cutoff, e_max, n_nodes)
        if breakpoints is None:
            breakpoints = getattr(stopping, "energies", ())
        extra = [b for b in np.asarray(breakpoints, dtype=float) if e_cutoff < b < e_max]
        nodes = np.unique(np.concatenate([nodes, extra]))
        nodes[0], nodes[-1] = e_cutoff, e_max
        panels = _gl_integral(self._inv_s, nodes[:-1], nodes[1:])
        t = np.zeros_like(nodes)
        t[:-1] = np.cumsum(panels[::-1])[::-1]
        self._nodes = nodes
        self._t = t

    def _inv_s(self, E):
        return 1.0 / self.stopping(E)

    @property
    def t_end(self) -> float:
        """Pseudo-time at the cutoff energy."""
        return float(self._t[0])

    def _check_energy(self, E):
        tol = 1e-12 * max(abs(self.e_max), 1.0)
        if np.any(E < self.e_cutoff - tol) or np.any(E > self.e_max + tol):
            raise DomainError(
                f"energy outside [{self.e_cutoff}, {self.e_max}] MeV"
            )

    def t_of_e(self, E):
        E = np.asarray(E, dtype=float)
        self._check_energy(E)
        E = np.clip(E, self.e_cutoff, self.e_max)
        i = np.clip(np.searchsorted(self._nodes, E, side="right") - 1, 0, self._nodes.size - 2)
        upper = self._nodes[i + 1]
        return self._t[i + 1] + _gl_integral(self._inv_s, E, upper)

    def e_of_t(self, t):
        t = np.asarray(t, dtype=float)
        tol = 1e-12 * max(self.t_end, 1.0)
        if np.any(t < -tol) or np.any(t > self.t_end + tol):
            raise DomainError(f"pseudo-time outside [0, {self.t_end}]")
        t = np.clip(t, 0.0, self.t_end)
        E = np.interp(t, self._t[::-1], self._nodes[::-1])
        for _ in range(6):
            E = E + (self.t_of_e(E) - t) * self.stopping(E)
            E = np.clip(E, self.e_cutoff, self.e_max)
        return E


def pseudo_time_of_energy(stopping, E, e_max=None, e_cutoff=None):
    """One-shot evaluation of t(E); builds a :class:`PseudoTimeMap`."""
    e_max = getattr(stopping, "e_max", None) if e_max is None else e_max
    e_cutoff = getattr(stopping, "e_min", None) if e_cutoff is None else e_cutoff
    return PseudoTimeMap(stopping, e_cutoff, e_max).t_of_e(E)


# ---------------------------------------------------------------------------
# Scattering
# ---------------------------------------------------------------------------


class ScatteringModel:
    """Differential scattering kernel Sigma_s(E, mu) of water per steradian.

    Subclasses implement :meth:`kernel`.  ``peak_width`` returns a scale in
    ``1 - mu`` below which the kernel is concentrated (``None`` if smooth);
    the moment quadrature grades its panels geometrically down to it.
    """

    def kernel(self, E: float, mu):
        raise NotImplementedError

    def peak_width(self, E: float) -> Optional[float]:
        return None

    def breakpoints(self, E: float):
        """Interior kink locations in mu (for piecewise-defined kernels)."""
        return ()


class NoScattering(ScatteringModel):
    def kernel(self, E, mu):
        return np.zeros_like(np.asarray(mu, dtype=float))


@dataclass
class IsotropicScattering(ScatteringModel):
    """Isotropic kernel with total cross section ``sigma``."""

    sigma: float = 1.0

    def kernel(self, E, mu):
        return np.full_like(np.asarray(mu, dtype=float), self.sigma / (4 * np.pi))


@dataclass
class ScreenedRutherford(ScatteringModel):
    """Sum of screened-Rutherford terms  c_k(E) / (1 - mu + 2 eta_k(E))^2.

    Each term is given by a pair of callables ``(strength, eta)``.
    """

    terms: list = field(default_factory=list)

    def kernel(self, E, mu):
        mu = np.asarray(mu, dtype=float)
        out = np.zeros_like(mu)
        for strength, eta in self.terms:
            out += strength(E) / (1.0 - mu + 2.0 * eta(E)) ** 2
        return out

    def kernel_nu(self, E, nu):
        """Kernel as a function of nu = 1 - mu (no cancellation near mu = 1)."""
        nu = np.asarray(nu, dtype=float)
        out = np.zeros_like(nu)
        for strength, eta in self.terms:
            out += strength(E) / (nu + 2.0 * eta(E)) ** 2
        return out

    def peak_width(self, E):
        return min(eta(E) for _, eta in self.terms) if self.terms else None

    def total(self, E):
        """Closed-form total cross section 2 pi int kernel dmu."""
        return sum(
            np.pi * strength(E) / (eta(E) * (1.0 + eta(E))) for strength, eta in self.terms
        )


def moliere_screening(E, Z):
    """Molière screening parameter eta = chi_a^2 / 4 for protons on element Z."""
    beta2, _, pc = _kinematics(E)
    a_tf = 0.885 * BOHR_RADIUS * Z ** (-1.0 / 3.0)
    chi0_sq = (HBAR_C / (pc * a_tf)) ** 2
    return 0.25 * chi0_sq * (1.13 + 3.76 * (FINE_STRUCTURE * Z) ** 2 / beta2)


def water_moliere_model() -> ScreenedRutherford:
    """Screened-Rutherford water kernel with Molière screening.

    Nuclear plus atomic-electron scattering is accounted for through the
    usual Z(Z+1) factor per atom.
    """
    terms = []
    for Z, count in WATER_ATOMS:
        atoms_per_gram = count * AVOGADRO / WATER_MOLAR_MASS

        def strength(E, Z=Z, n=atoms_per_gram):
            beta2, _, pc = _kinematics(E)
            pv = pc * np.sqrt(beta2)
            return n * Z * (Z + 1) * (E_SQUARED / pv) ** 2

        def eta(E, Z=Z):
            return moliere_screening(E, Z)

        terms.append((strength, eta))
    return ScreenedRutherford(terms)


class TabulatedKernel(ScatteringModel):
    """Kernel tabulated on an (energy, mu) grid; bilinear in (log E, mu)."""

    def __init__(self, energies, mu, values):
        self.energies = np.asarray(energies, dtype=float)
        self.mu = np.asarray(mu, dtype=float)
        self.values = np.asarray(values, dtype=float)
        _check_ascending(self.energies)
        _check_ascending(self.mu)
        if self.values.shape != (self.energies.size, self.mu.size):
            raise ValueError("values must have shape (n_energies, n_mu)")
        if self.mu[0] < -1 or self.mu[-1] > 1:
            raise ValueError("mu grid must lie in [-1, 1]")
        if np.any(self.values < 0):
            raise ValueError("kernel values must be non-negative")

    def kernel(self, E, mu):
        if not self.energies[0] <= E <= self.energies[-1]:
            raise DomainError(f"energy {E} outside tabulated kernel range")
        logs = np.log(self.energies)
        j = int(np.clip(np.searchsorted(logs, np.log(E)) - 1, 0, logs.size - 2))
        w = (np.log(E) - logs[j]) / (logs[j + 1] - logs[j])
        row = (1 - w) * self.values[j] + w * self.values[j + 1]
        return np.interp(mu, self.mu, row, left=0.0, right=0.0)

    def breakpoints(self, E):
        return self.mu


# Legendre deficits D_l(nu) = 1 - P_l(1 - nu), stable near nu = 0.
def legendre_deficits(L: int, nu):
    """Return array (L+1, len(nu)) of 1 - P_l(1 - nu) for l = 0..L."""
    nu = np.asarray(nu, dtype=float)
    D = np.zeros((L + 1,) + nu.shape)
    if L >= 1:
        D[1] = nu
    for l in range(1, L):
        D[l + 1] = ((2 * l + 1) * (nu * (1.0 - D[l]) + D[l]) - l * D[l - 1]) / (l + 1)
    return D


def _panels_nu(model, E):
    width = model.peak_width(E)
    edges = [0.0, 2.0]
    if width is not None and width < 0.1:
        lo = max(width * 1e-3, 1e-300)
        edges = [0.0] + list(np.geomspace(lo, 2.0, int(np.ceil(np.log10(2.0 / lo))) + 1))
    for mu in model.breakpoints(E):
        nu = 1.0 - float(mu)
        if 0.0 < nu < 2.0:
            edges.append(nu)
    return np.unique(edges)


def _deficit_integrals(model, E, L, order):
    """Return (G0, Delta_l for l=0..L) with order-point GL per panel."""
    x, w = np.polynomial.legendre.leggauss(order)
    edges = _panels_nu(model, E)
    a, b = edges[:-1, None], edges[1:, None]
    nu = (0.5 * (a + b) + 0.5 * (b - a) * x).ravel()
    wt = (0.5 * (b - a) * w).ravel()
    if hasattr(model, "kernel_nu"):
        k = model.kernel_nu(E, nu)
    else:
        k = model.kernel(E, 1.0 - nu)
    kw = 2 * np.pi * k * wt
    D = legendre_deficits(L, nu)
    return kw.sum(), D @ kw


def scattering_deficits(model, E, L, rtol=1e-10, max_order=4096):
    """Total cross section and deficits 2 pi int (1 - P_l) Sigma_s dmu.

    The quadrature order is doubled from ``max(4L, 8)`` until the relative
    change of every quantity falls below ``rtol``.
    """
    order = max(4 * L, 8)
    prev = _deficit_integrals(model, E, L, order)
    while True:
        order *= 2
        if order > max_order:
            raise AccuracyError(
                f"scattering moments did not converge at E={E} MeV (order {order // 2})"
            )
        cur = _deficit_integrals(model, E, L, order)
        floor = 1e-15 * abs(cur[0])
        ok_total = abs(cur[0] - prev[0]) <= rtol * abs(cur[0]) + np.finfo(float).tiny
        ok_def = np.all(np.abs(cur[1] - prev[1]) <= rtol * np.abs(cur[1]) + floor)
        if ok_total and ok_def:
            return cur
        prev = cur


def scattering_moments(model, E, N: int, rtol=1e-10):
    """Legendre moments G_l = 2 pi int P_l(mu) Sigma_s(E, mu) dmu, l = 0..N.

    Returns ``(G, sigma_t)`` with ``sigma_t = G[0]``.
    """
    if N < 0:
        raise ValueError("degree must be non-negative")
    sigma_t, deficits = scattering_deficits(model, E, N, rtol=rtol)
    return sigma_t - deficits, sigma_t


# ---------------------------------------------------------------------------
# Bundle
# ---------------------------------------------------------------------------


class MomentTable:
    """Scattering quantities tabulated on a log-energy grid.

    Columns are interpolated with cubic splines in log E (of the log of the
    value when the column is strictly positive).
    """

    def __init__(self, energies, sigma_t, G, damping):
        from scipy.interpolate import CubicSpline

        self.energies = np.asarray(energies, dtype=float)
        self.e_min, self.e_max = float(self.energies[0]), float(self.energies[-1])
        x = np.log(self.energies)
        cols = np.column_stack([sigma_t, G, damping])
        self._positive = np.all(cols > 0, axis=0)
        vals = np.where(self._positive, np.log(np.where(cols > 0, cols, 1.0)), cols)
        self._spline = CubicSpline(x, vals, axis=0)
        self.degree = G.shape[1] - 1

    def _eval(self, E):
        E = np.asarray(E, dtype=float)
        tol = 1e-9
        if np.any(E < self.e_min * (1 - tol)) or np.any(E > self.e_max * (1 + tol)):
            raise DomainError(f"energy outside moment table [{self.e_min}, {self.e_max}] MeV")
        v = self._spline(np.log(np.clip(E, self.e_min, self.e_max)))
        return np.where(self._positive, np.exp(v), v)

    def __call__(self, E):
        """Return (sigma_t, G[..., 0..N], damping[..., 0..N])."""
        v = self._eval(E)
        n = self.degree + 1
        return v[..., 0], v[..., 1 : 1 + n], v[..., 1 + n :]

    def sigma_t(self, E):
        return self._eval(E)[..., 0]


@dataclass
class PhysicsTables:
    """Material data used by the transport solvers.

    ``correction_degree`` enables the extended transport correction: the
    forward-peaked part of the kernel represented by the moment of that
    degree is treated as unscattered, so that

        sigma_t = G_0 - G_L,   G_l -> G_l - G_L,   with L = correction_degree.

    Both the uncollided attenuation and the collided scattering operator see
    the same corrected values, which keeps the split consistent.
    """

    stopping: Callable
    straggling: Optional[Callable] = None
    scattering: ScatteringModel = field(default_factory=NoScattering)
    e_cutoff: float = 1.0
    correction_degree: Optional[int] = None
    e_max: Optional[float] = None
    rtol: float = 1e-10
    table_nodes: int = 97
    _tables: dict = field(default_factory=dict, init=False, repr=False)

    def stopping_power(self, E):
        return self.stopping(E)

    def straggling_coefficient(self, E):
        E = np.asarray(E, dtype=float)
        if self.straggling is None:
            return np.zeros_like(E)
        return self.straggling(E)

    def moments(self, E: float, N: int):
        """Return (sigma_t, G[0..N], damping[0..N]) with damping = sigma_t - G."""
        L = max(N, self.correction_degree or 0)
        total, deficits = scattering_deficits(self.scattering, float(E), L, rtol=self.rtol)
        if self.correction_degree is None:
            sigma_t = total
            G = total - deficits[: N + 1]
        else:
            sigma_t = deficits[self.correction_degree]
            G = sigma_t - deficits[: N + 1]
        return sigma_t, G, deficits[: N + 1].copy()

    def moment_table(self, N: int) -> MomentTable:
        """Interpolation table of :meth:`moments` for degree N (cached)."""
        if N not in self._tables:
            top = self.e_max if self.e_max is not None else getattr(self.stopping, "e_max", 300.0)
            energies = np.geomspace(self.e_cutoff, top, self.table_nodes)
            rows = [self.moments(E, N) for E in energies]
            self._tables[N] = MomentTable(
                energies,
                np.array([r[0] for r in rows]),
                np.array([r[1] for r in rows]),
                np.array([r[2] for r in rows]),
            )
        return self._tables[N]

    @property
    def has_scattering(self) -> bool:
        return not isinstance(self.scattering, NoScattering)

    def sigma_t(self, E):
        """Total (possibly corrected) cross section, vectorised over E."""
        E = np.asarray(E, dtype=float)
        if not self.has_scattering:
            return np.zeros_like(E)
        return self.moment_table(0).sigma_t(E)
