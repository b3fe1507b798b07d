"""Collided moment equation in pseudo-time and the full solve pipeline.

With u(t, x) the P_N moments of the transformed collided flux rho S psi_c,

    du/dt = -A . grad(u / rho) - u diag(Sigma_t - G_ll) + q(x) g^T

where q g^T is the first-collision source from the uncollided beam.  The
moment damping is integrated implicitly; advection and the source are
explicit.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .analysis import DoseGrid, RankHistory
from .dlra import BugConfig, LowRankState, RhsSplit, bug_step
from .domain import BeamSource, DensityGrid
from .exceptions import AssemblyError, SolverError
from .physics import PhysicsTables, PseudoTimeMap
from .pn_ops import (
    FOUR_PI,
    FluxMatrices,
    SHBasis,
    UpwindStencil,
    beam_moments,
    boundary_outflow,
    build_basis,
    build_flux_matrices,
)
from .raytracer import EnergyMesh, UncollidedFlux, trace_all

log = logging.getLogger(__name__)

SQRT_4PI = math.sqrt(FOUR_PI)
DENSE_LIMIT = 50_000_000  # entries of the full-rank solution matrix


def cfl_step(t_end: float, density: DensityGrid, cfl: float):
    """Uniform step dt <= cfl * rho_min * dx_min dividing t_end exactly."""
    bound = cfl * float(density.rho.min()) * min(density.grid.spacing)
    n = max(1, math.ceil(t_end / bound - 1e-12))
    return t_end / n, n


@dataclass
class CollidedProblem:
    density: DensityGrid
    physics: PhysicsTables
    basis: SHBasis
    matrices: FluxMatrices
    flux: UncollidedFlux
    tmap: PseudoTimeMap
    direction: np.ndarray
    dt: float
    n_steps: int
    weight: float = 1.0

    def __post_init__(self):
        n = self.density.grid.n_cells
        if self.flux.grid != self.density.grid or self.flux.rho.size != n:
            raise AssemblyError("uncollided flux and density live on different grids")
        if self.matrices.size != self.basis.size:
            raise AssemblyError("flux matrices do not match the P_N basis")
        if abs(self.dt * self.n_steps - self.tmap.t_end) > 1e-9 * self.tmap.t_end:
            raise AssemblyError("pseudo-time grid does not end at t(E_cutoff)")
        self.stencil = UpwindStencil(self.density.grid)
        self.m_in = beam_moments(self.basis, self.direction)
        self.t_nodes = self.dt * np.arange(self.n_steps + 1)
        self.t_nodes[-1] = self.tmap.t_end
        self.e_nodes = self.tmap.e_of_t(self.t_nodes)
        self.e_nodes[0] = self.tmap.e_max
        self.e_nodes[-1] = self.tmap.e_cutoff
        if self.physics.has_scattering:
            table = self.physics.moment_table(self.basis.N)
            sig, G, damp = table(self.e_nodes)
        else:
            k = self.e_nodes.size
            sig, G, damp = np.zeros(k), np.zeros((k, self.basis.N + 1)), np.zeros((k, self.basis.N + 1))
        self.sigma_t, self.G, self.damping = sig, G, damp

    @property
    def shape(self):
        return self.density.grid.n_cells, self.basis.size

    def step_of(self, t: float) -> int:
        k = int(round(t / self.dt))
        if abs(self.t_nodes[min(k, self.n_steps)] - t) > 1e-9 * self.dt:
            raise ValueError(f"t={t} is not a pseudo-time node")
        return min(k, self.n_steps)

    def stiff_diag(self, k: int):
        return self.damping[k][self.basis.degrees]

    def source(self, k: int):
        """Spatial and angular factors of the source over step k -> (q, g)."""
        q = self.flux.removal_density(self.e_nodes[k + 1], self.e_nodes[k], self.physics) / self.dt
        G = self.G[k]
        ratio = G / G[0] if G[0] > 0 else np.ones_like(G)
        return q, ratio[self.basis.degrees] * self.m_in


class TransportRhs(RhsSplit):
    """Factored evaluation of the P_N right-hand side for the BUG integrator."""

    def __init__(self, problem: CollidedProblem):
        self.problem = problem
        self.shape = problem.shape
        self.rho = problem.density.flat[:, None]
        self._source = {}

    def source(self, t):
        k = self.problem.step_of(t)
        if k not in self._source:
            self._source = {k: self.problem.source(k)}
        return self._source[k]

    def stiff_diag(self, t):
        return self.problem.stiff_diag(self.problem.step_of(t))

    def _differences(self, W):
        return [self.problem.stencil.differences(W, i) for i in range(3)]

    def dense_explicit(self, t, u):
        m = self.problem.matrices
        out = np.zeros_like(u)
        for i, (Dm, Dp) in enumerate(self._differences(u / self.rho)):
            out -= Dm @ m.plus[i] + Dp @ m.minus[i]
        q, g = self.source(t)
        return out + np.outer(q, g)

    def explicit_K(self, t, K, V):
        m = self.problem.matrices
        out = np.zeros_like(K)
        for i, (Dm, Dp) in enumerate(self._differences(K / self.rho)):
            out -= Dm @ (V.T @ m.plus[i] @ V) + Dp @ (V.T @ m.minus[i] @ V)
        q, g = self.source(t)
        return out + np.outer(q, g @ V)

    def explicit_L(self, t, X, L):
        m = self.problem.matrices
        out = np.zeros_like(L)
        for i, (Dm, Dp) in enumerate(self._differences(X / self.rho)):
            out -= m.plus[i] @ L @ (X.T @ Dm).T + m.minus[i] @ L @ (X.T @ Dp).T
        q, g = self.source(t)
        return out + np.outer(g, q @ X)

    def explicit_S(self, t, X, S, V):
        m = self.problem.matrices
        out = np.zeros((X.shape[1], V.shape[1]))
        for i, (Dm, Dp) in enumerate(self._differences(X / self.rho)):
            out -= (X.T @ Dm) @ S @ (V.T @ m.plus[i] @ V) + (X.T @ Dp) @ S @ (V.T @ m.minus[i] @ V)
        q, g = self.source(t)
        return out + np.outer(X.T @ q, g @ V)


def assemble_rhs(problem: CollidedProblem) -> TransportRhs:
    return TransportRhs(problem)


def accumulate_dose(u0, dE: float, cell_volume: float):
    """Energy deposited per cell [MeV] by the zeroth moment over an energy
    loss dE: sqrt(4 pi) u0 dE times the cell volume."""
    return SQRT_4PI * np.asarray(u0) * dE * cell_volume


@dataclass
class SolveReport:
    dose: DoseGrid
    ranks: RankHistory
    step_times: np.ndarray
    timings: dict
    memory_elements: int
    warnings: list = field(default_factory=list)
    energy: dict = field(default_factory=dict)
    solver: str = "lowrank"
    final_state: Optional[object] = None

    @property
    def n_steps(self) -> int:
        return len(self.step_times)


def _finish(problem, collided, history, step_times, timings, memory, warnings, energy, solver, final):
    flux = problem.flux
    dose = DoseGrid(problem.density.grid, collided, flux.deposition)
    energy.update(
        {
            "uncollided_deposit": float(flux.deposition.sum()),
            "collided_deposit": float(collided.sum()),
        }
    )
    for k, v in flux.ledger.items():
        energy["uncollided_" + k] = v
    if flux.ledger.get("clipped_mass", 0) > 0:
        warnings.append(f"uncollided clipping removed {flux.ledger['clipped_mass']:.3e} particles")
    return SolveReport(
        dose=dose,
        ranks=history,
        step_times=np.asarray(step_times),
        timings=timings,
        memory_elements=memory,
        warnings=warnings,
        energy=energy,
        solver=solver,
        final_state=final,
    )


def _check_finite(arr, step):
    if not np.all(np.isfinite(arr)):
        raise SolverError(f"non-finite collided solution at step {step}")


def initial_state(problem: CollidedProblem, rhs: TransportRhs, rank: int) -> LowRankState:
    """Zero collided flux whose leading basis vectors follow the first source."""
    q, g = rhs.source(0.0)
    n_x, n_m = problem.shape
    rank = min(rank, n_x, n_m)
    x_dir = q if np.any(q) else np.ones(n_x)
    return LowRankState.zero(x_dir, g, rank)


def solve_collided_lowrank(
    problem: CollidedProblem, config: BugConfig, callback=None, initial: Optional[LowRankState] = None
) -> SolveReport:
    """March the collided equation with the rank-adaptive BUG integrator.

    ``initial`` replaces the zero starting state.  The zero state has rank
    ``config.r0``, or ``config.r_max`` when ``theta == 0``.  With
    ``theta == 0`` the rank is also never allowed below that starting rank, so
    exactly-zero singular directions stay in the basis and the run reproduces
    the dense solve.
    """
    rhs = assemble_rhs(problem)
    vol = problem.density.grid.cell_volume
    if initial is None:
        r0 = config.r0 if config.theta > 0 else config.r_max
        state = initial_state(problem, rhs, r0)
        if config.theta == 0:
            config = replace(config, r_min=state.rank)
    else:
        state = initial
    collided = np.zeros(problem.shape[0])
    history = RankHistory()
    step_times = []
    warnings = []
    leak_p = leak_e = 0.0
    peak_mem = state.memory_elements
    capped = False
    t_start = time.perf_counter()
    for n in range(problem.n_steps):
        t0 = time.perf_counter()
        t = problem.t_nodes[n]
        out = _lowrank_outflow(problem, state)
        leak_p += problem.dt * out
        leak_e += problem.dt * out * problem.e_nodes[n]
        try:
            state = bug_step(state, rhs, t, problem.dt, config)
        except SolverError as exc:
            raise SolverError(f"step {n}: {exc}") from exc
        _check_finite(state.S, n)
        peak_mem = max(peak_mem, state.memory_elements)
        capped |= state.capped
        dE = problem.e_nodes[n] - problem.e_nodes[n + 1]
        collided += accumulate_dose(state.column(0), dE, vol)
        history.append(n + 1, problem.t_nodes[n + 1], problem.e_nodes[n + 1], state.rank, state.sigma)
        step_times.append(time.perf_counter() - t0)
        if callback is not None:
            callback(n, state)
    cut = accumulate_dose(state.column(0), problem.e_nodes[-1], vol)
    collided += cut
    if capped:
        warnings.append(f"rank cap r_max={config.r_max} was reached")
    energy = {
        "collided_leak_particles": float(leak_p),
        "collided_leak_energy": float(leak_e),
        "collided_cutoff_deposit": float(cut.sum()),
    }
    timings = {"loop": time.perf_counter() - t_start}
    return _finish(problem, collided, history, step_times, timings, peak_mem, warnings, energy, "lowrank", state)


def _lowrank_outflow(problem, state: LowRankState):
    # outflow is linear in u: evaluate on X and contract with S V^T
    m = problem.matrices
    grid = problem.density.grid
    W = state.X / problem.density.flat[:, None]
    coef = state.S @ state.V.T
    total = 0.0
    for i in range(3):
        lo, hi = problem.stencil.boundary_faces(W, i)
        a = grid.face_area(i)
        total += a * (np.sum(hi @ (coef @ m.plus[i][:, 0])) - np.sum(lo @ (coef @ m.minus[i][:, 0])))
    return SQRT_4PI * total


def solve_collided_fullrank(
    problem: CollidedProblem, limit: int = DENSE_LIMIT, callback=None, initial=None
) -> SolveReport:
    """Dense IMEX Euler on the same semidiscretisation (reference solver).

    ``initial`` is an optional (n_cells, n_moments) starting value.
    """
    n_x, n_m = problem.shape
    if n_x * n_m > limit:
        raise SolverError(
            f"full-rank solve needs {n_x * n_m} entries, above the limit of {limit}; "
            "reduce the grid or the P_N degree"
        )
    rhs = assemble_rhs(problem)
    vol = problem.density.grid.cell_volume
    u = np.zeros((n_x, n_m)) if initial is None else np.array(initial, dtype=float).reshape(n_x, n_m)
    collided = np.zeros(n_x)
    history = RankHistory()
    step_times = []
    leak_p = leak_e = 0.0
    t_start = time.perf_counter()
    for n in range(problem.n_steps):
        t0 = time.perf_counter()
        t = problem.t_nodes[n]
        out = boundary_outflow(u, problem.density, problem.matrices, problem.stencil)
        leak_p += problem.dt * out
        leak_e += problem.dt * out * problem.e_nodes[n]
        u = (u + problem.dt * rhs.dense_explicit(t, u)) / (1.0 + problem.dt * rhs.stiff_diag(t + problem.dt))
        _check_finite(u, n)
        dE = problem.e_nodes[n] - problem.e_nodes[n + 1]
        collided += accumulate_dose(u[:, 0], dE, vol)
        history.append(n + 1, problem.t_nodes[n + 1], problem.e_nodes[n + 1], n_m, ())
        step_times.append(time.perf_counter() - t0)
        if callback is not None:
            callback(n, u)
    cut = accumulate_dose(u[:, 0], problem.e_nodes[-1], vol)
    collided += cut
    energy = {
        "collided_leak_particles": float(leak_p),
        "collided_leak_energy": float(leak_e),
        "collided_cutoff_deposit": float(cut.sum()),
    }
    timings = {"loop": time.perf_counter() - t_start}
    return _finish(problem, collided, history, step_times, timings, u.size, [], energy, "fullrank", u)


def build_problem(
    beam: BeamSource,
    density: DensityGrid,
    physics: PhysicsTables,
    N: int,
    n_groups: int = 128,
    order: int = 2,
    cfl: float = 0.25,
    flux: UncollidedFlux = None,
) -> CollidedProblem:
    """Ray trace the uncollided beam and assemble the collided problem."""
    e_max = beam.e_max
    mesh = EnergyMesh.uniform(e_max, beam.e_cutoff, n_groups, order)
    if flux is None:
        flux = trace_all(beam, density, physics, mesh)
    tmap = PseudoTimeMap(physics.stopping, beam.e_cutoff, e_max)
    dt, n = cfl_step(tmap.t_end, density, cfl)
    basis = build_basis(N)
    return CollidedProblem(
        density=density,
        physics=physics,
        basis=basis,
        matrices=build_flux_matrices(basis),
        flux=flux,
        tmap=tmap,
        direction=beam.direction,
        dt=dt,
        n_steps=n,
        weight=flux.ledger["injected_particles"],
    )


def energy_balance(report: SolveReport) -> dict:
    """Injected beam energy against deposits, leakage and escape."""
    e = report.energy
    injected = e["uncollided_injected_energy"]
    accounted = (
        e["uncollided_deposit"]
        + e["collided_deposit"]
        + e["uncollided_exit_energy"]
        + e.get("collided_leak_energy", 0.0)
    )
    return {
        "injected": injected,
        "accounted": accounted,
        "relative_defect": (injected - accounted) / injected if injected else 0.0,
    }
