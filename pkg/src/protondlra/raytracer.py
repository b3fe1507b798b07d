"""Uncollided flux: straight rays through the voxel grid.

Along each ray the uncollided flux obeys, in mass thickness tau = rho s,

    d psi/d tau = d(S psi)/dE + 1/2 d^2(T psi)/dE^2 - Sigma_t psi

with S, T, Sigma_t the water values.  Energy is discretised with
discontinuous Legendre polynomials per group (upwind flux towards lower
energy for slowing down, symmetric interior penalty for straggling).  The
operator is constant inside a cell, so each crossing is advanced with the
exact propagator exp(dtau L) and its time integral, obtained from one block
matrix exponential.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre as npleg
from scipy.linalg import expm

from .domain import BeamSource, DensityGrid, Grid3
from .exceptions import DomainError, SolverError
from .physics import PhysicsTables

log = logging.getLogger(__name__)


def _legendre_values(order, xi):
    """P_k(xi) for k = 0..order, shape (order+1, len(xi))."""
    xi = np.asarray(xi, dtype=float)
    P = np.empty((order + 1,) + xi.shape)
    P[0] = 1.0
    if order >= 1:
        P[1] = xi
    for k in range(1, order):
        P[k + 1] = ((2 * k + 1) * xi * P[k] - k * P[k - 1]) / (k + 1)
    return P


def _legendre_derivs(order, xi):
    xi = np.asarray(xi, dtype=float)
    dP = np.empty((order + 1,) + xi.shape)
    for k in range(order + 1):
        c = np.zeros(k + 1)
        c[k] = 1.0
        dP[k] = npleg.legval(xi, npleg.legder(c)) if k else 0.0
    return dP


@dataclass(frozen=True)
class EnergyMesh:
    """Energy groups ordered from high to low energy, polynomial order p."""

    edges: np.ndarray
    order: int = 2

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float)
        if edges.ndim != 1 or edges.size < 2:
            raise ValueError("need at least one energy group")
        if np.any(np.diff(edges) >= 0):
            raise ValueError("group edges must be strictly decreasing")
        if self.order not in (0, 1, 2):
            raise ValueError("polynomial order must be 0, 1 or 2")
        object.__setattr__(self, "edges", edges)

    @classmethod
    def uniform(cls, e_max, e_cutoff, n_groups, order=2):
        return cls(np.linspace(e_max, e_cutoff, n_groups + 1), order)

    @property
    def n_groups(self) -> int:
        return self.edges.size - 1

    @property
    def n_basis(self) -> int:
        return self.order + 1

    @property
    def n_dofs(self) -> int:
        return self.n_groups * self.n_basis

    @property
    def e_max(self) -> float:
        return float(self.edges[0])

    @property
    def e_cutoff(self) -> float:
        return float(self.edges[-1])

    @property
    def hi(self):
        return self.edges[:-1]

    @property
    def lo(self):
        return self.edges[1:]

    @property
    def widths(self):
        return self.edges[:-1] - self.edges[1:]

    def group_of(self, E):
        """Group index under [lo, hi); e_max belongs to group 0."""
        E = np.asarray(E, dtype=float)
        tol = 1e-12 * self.e_max
        if np.any(E < self.e_cutoff - tol) or np.any(E > self.e_max + tol):
            raise DomainError(f"energy outside mesh [{self.e_cutoff}, {self.e_max}] MeV")
        g = np.searchsorted(-self.edges, -E, side="left") - 1
        return np.clip(g, 0, self.n_groups - 1)

    def local_coordinate(self, g, E):
        return (2.0 * np.asarray(E) - self.lo[g] - self.hi[g]) / self.widths[g]

    def evaluate(self, coeffs, E):
        """Evaluate a DG function (coefficients, shape (..., n_dofs)) at E."""
        E = np.asarray(E, dtype=float)
        g = self.group_of(E)
        P = _legendre_values(self.order, self.local_coordinate(g, E))
        c = np.asarray(coeffs).reshape(np.shape(coeffs)[:-1] + (self.n_groups, self.n_basis))
        sel = c[..., g, :]
        return np.sum(sel * np.moveaxis(P, 0, -1), axis=-1)

    def quadrature(self, n_points=None):
        """Gauss points per group: energies (n_groups, q), weights (n_groups, q),
        reference basis values (n_basis, q)."""
        q = self.order + 3 if n_points is None else n_points
        x, w = npleg.leggauss(q)
        h = self.widths[:, None]
        E = 0.5 * (self.lo[:, None] + self.hi[:, None]) + 0.5 * h * x
        return E, 0.5 * h * w, _legendre_values(self.order, x)

    def project(self, f, n_points=None):
        """L2 projection of a callable onto the DG space."""
        E, W, P = self.quadrature(n_points or self.order + 8)
        vals = f(E) * W
        norms = 2.0 / (2 * np.arange(self.n_basis) + 1)
        c = (vals @ P.T) / (0.5 * self.widths[:, None] * norms)
        return c.ravel()

    def project_delta(self, E0):
        g = int(self.group_of(E0))
        P = _legendre_values(self.order, self.local_coordinate(g, E0))
        c = np.zeros((self.n_groups, self.n_basis))
        c[g] = P * (2 * np.arange(self.n_basis) + 1) / self.widths[g]
        return c.ravel()

    def window_weights(self, e_lo, e_hi, weight=None, n_points=None):
        """Row vector w with  w . c = int_{e_lo}^{e_hi} weight(E) psi(E) dE."""
        e_lo, e_hi = max(e_lo, self.e_cutoff), min(e_hi, self.e_max)
        out = np.zeros((self.n_groups, self.n_basis))
        if e_hi <= e_lo:
            return out.ravel()
        x, w = npleg.leggauss(n_points or self.order + 4)
        g_top = int(self.group_of(e_hi))
        g_bot = int(self.group_of(e_lo))
        for g in range(g_top, g_bot + 1):
            a, b = max(e_lo, self.lo[g]), min(e_hi, self.hi[g])
            if b <= a:
                continue
            E = 0.5 * (a + b) + 0.5 * (b - a) * x
            wt = 0.5 * (b - a) * w
            if weight is not None:
                wt = wt * weight(E)
            out[g] = _legendre_values(self.order, self.local_coordinate(g, E)) @ wt
        return out.ravel()


class EnergyOperator:
    """DG discretisation L of the energy operator plus diagnostic functionals."""

    def __init__(self, mesh: EnergyMesh, physics: PhysicsTables, penalty=1.0):
        self.mesh = mesh
        p, G, nb = mesh.order, mesh.n_groups, mesh.n_basis
        n = mesh.n_dofs
        Eq, Wq, Pq = mesh.quadrature()
        xq = npleg.leggauss(Pq.shape[1])[0]
        dPq = _legendre_derivs(p, xq)
        h = mesh.widths
        S = physics.stopping_power(Eq)
        T = physics.straggling_coefficient(Eq)
        sig = physics.sigma_t(Eq)
        dT = self._derivative(physics.straggling_coefficient, Eq, mesh)
        Pm = _legendre_values(p, np.array([-1.0]))[:, 0]  # values at lo end
        Pp = np.ones(nb)  # values at hi end
        dPm = _legendre_derivs(p, np.array([-1.0]))[:, 0]
        dPp = _legendre_derivs(p, np.array([1.0]))[:, 0]
        S_lo = physics.stopping_power(mesh.lo)
        T_edge = physics.straggling_coefficient(mesh.edges)

        K = np.zeros((n, n))
        blk = lambda g: slice(g * nb, (g + 1) * nb)  # noqa: E731
        for g in range(G):
            sg = blk(g)
            dphi = dPq * (2.0 / h[g])
            # slowing down: -int phi' S psi + upwind face terms
            K[sg, sg] -= (dphi * (S[g] * Wq[g])) @ Pq.T
            K[sg, sg] -= S_lo[g] * np.outer(Pm, Pm)
            if g > 0:
                K[sg, blk(g - 1)] += S_lo[g - 1] * np.outer(Pp, Pm)
            # removal
            K[sg, sg] -= (Pq * (sig[g] * Wq[g])) @ Pq.T
            # straggling volume term: -1/2 int phi' (T psi)'
            dq = dPq * (2.0 / h[g]) * (T[g] * Wq[g]) + Pq * (dT[g] * Wq[g])
            K[sg, sg] -= 0.5 * dphi @ dq.T

        # straggling interface terms; left = lower-energy group g+1, right = g
        for g in range(G - 1):
            gl, gr = g + 1, g
            TF = T_edge[g + 1]
            if TF == 0.0 and not np.any(T):
                continue
            hl, hr = h[gl], h[gr]
            # traces: values and derivatives of basis at the face
            vl, vr = Pp, Pm
            dvl, dvr = dPp * 2.0 / hl, dPm * 2.0 / hr
            # q = T psi; q' = T' psi + T psi'
            dTF = float(self._derivative(physics.straggling_coefficient, np.array([mesh.edges[g + 1]]), mesh)[0])
            dql = dTF * vl + TF * dvl
            dqr = dTF * vr + TF * dvr
            sigma = penalty * (p + 1) ** 2 / min(hl, hr)
            jump_v = {gl: vl, gr: -vr}
            avg_dv = {gl: 0.5 * dvl, gr: 0.5 * dvr}
            jump_q = {gl: TF * vl, gr: -TF * vr}
            avg_dq = {gl: 0.5 * dql, gr: 0.5 * dqr}
            for a in (gl, gr):
                for b in (gl, gr):
                    form = (
                        -np.outer(jump_v[a], avg_dq[b])
                        - np.outer(avg_dv[a], jump_q[b])
                        + sigma * np.outer(jump_v[a], jump_q[b])
                    )
                    K[blk(a), blk(b)] -= 0.5 * form

        mass = np.concatenate([0.5 * h[g] * 2.0 / (2 * np.arange(nb) + 1) for g in range(G)])
        self.mass = mass
        self.matrix = K / mass[:, None]

        # functionals (row vectors acting on coefficient vectors)
        self.particles = np.zeros(n)
        self.particles[::nb] = h
        self.energy = np.zeros(n)
        self.energy[::nb] = h * 0.5 * (mesh.lo + mesh.hi)
        if nb > 1:
            self.energy[1::nb] = h**2 / 6.0
        self.csd_rate = ((Pq[None] * (S * Wq)[:, None, :]).sum(-1)).ravel()
        self.removal_rate = ((Pq[None] * (sig * Wq)[:, None, :]).sum(-1)).ravel()
        self.removal_energy_rate = ((Pq[None] * (sig * Eq * Wq)[:, None, :]).sum(-1)).ravel()
        self.cutoff_rate = np.zeros(n)
        self.cutoff_rate[(G - 1) * nb :] = S_lo[-1] * Pm
        self.straggle_energy_rate = np.zeros(n)
        self.straggle_energy_rate[:nb] = -0.5 * T_edge[0] * Pp
        self.straggle_energy_rate[(G - 1) * nb :] += 0.5 * T_edge[-1] * Pm
        self._cache = {}

    @staticmethod
    def _derivative(f, E, mesh):
        lo, hi = mesh.e_cutoff, mesh.e_max
        d = 1e-5 * np.maximum(np.abs(E), 1.0)
        a = np.clip(E - d, lo, hi)
        b = np.clip(E + d, lo, hi)
        return (f(b) - f(a)) / (b - a)

    def propagators(self, dtau: float):
        """Return (exp(dtau L), int_0^dtau exp(s L) ds)."""
        key = float(dtau)
        if key not in self._cache:
            n = self.matrix.shape[0]
            big = np.zeros((2 * n, 2 * n))
            big[:n, :n] = self.matrix * dtau
            big[:n, n:] = np.eye(n) * dtau
            E = expm(big)
            self._cache[key] = (E[:n, :n].copy(), E[:n, n:].copy())
        return self._cache[key]


def siddon(grid: Grid3, origin, direction):
    """Exact traversal of a straight ray through the grid.

    Returns ``(cells, lengths)``: flat cell indices in traversal order and
    the path length inside each.
    """
    p0 = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    lo = np.array(grid.origin)
    hi = lo + np.array(grid.size)
    a_min, a_max = -np.inf, np.inf
    alphas = []
    for ax in range(3):
        if abs(d[ax]) < 1e-15:
            if not lo[ax] <= p0[ax] <= hi[ax]:
                return np.zeros(0, dtype=int), np.zeros(0)
            continue
        a0 = (lo[ax] - p0[ax]) / d[ax]
        a1 = (hi[ax] - p0[ax]) / d[ax]
        a_min = max(a_min, min(a0, a1))
        a_max = min(a_max, max(a0, a1))
        alphas.append((grid.edges(ax) - p0[ax]) / d[ax])
    a_min = max(a_min, 0.0)
    if not a_max > a_min:
        return np.zeros(0, dtype=int), np.zeros(0)
    a = np.concatenate([[a_min, a_max]] + alphas)
    a = np.unique(a[(a >= a_min) & (a <= a_max)])
    keep = np.diff(a) > 1e-12 * (a_max - a_min)
    mids = 0.5 * (a[:-1] + a[1:])[keep]
    lengths = np.diff(a)[keep]
    pts = p0[None, :] + mids[:, None] * d[None, :]
    idx = np.floor((pts - lo) / np.array(grid.spacing)).astype(int)
    idx = np.clip(idx, 0, np.array(grid.shape) - 1)
    cells = np.ravel_multi_index(idx.T, grid.shape)
    return cells, lengths


@dataclass
class UncollidedFlux:
    """Ray-traced uncollided flux and its energy tallies.

    Flux values are path-length averaged angular fluences [1/(cm^2 MeV)] of
    the delta-in-angle beam; unique density sequences along rays share one
    stored profile (``type_flux``, per unit ray weight and per unit area).
    """

    grid: Grid3
    mesh: EnergyMesh
    direction: np.ndarray
    rho: np.ndarray  # flat density
    ray_cells: np.ndarray  # (n_rays, n_along)
    ray_type: np.ndarray  # (n_rays,)
    ray_weight: np.ndarray  # (n_rays,)
    type_flux: np.ndarray  # (n_types, n_along, n_dofs)
    csd_deposit: np.ndarray  # (n_cells,) MeV
    cutoff_deposit: np.ndarray  # (n_cells,) MeV
    removed_particles: np.ndarray  # (n_cells,)
    ledger: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cell_ray = np.full(self.grid.n_cells, -1)
        self.cell_pos = np.full(self.grid.n_cells, -1)
        for r, cells in enumerate(self.ray_cells):
            self.cell_ray[cells] = r
            self.cell_pos[cells] = np.arange(cells.size)

    @property
    def deposition(self):
        return self.csd_deposit + self.cutoff_deposit

    def cell_coefficients(self, cell: int):
        r = self.cell_ray[cell]
        if r < 0:
            return np.zeros(self.mesh.n_dofs)
        return self.ray_weight[r] * self.type_flux[self.ray_type[r], self.cell_pos[cell]]

    def group_averages(self, cell: int):
        c = self.cell_coefficients(cell).reshape(self.mesh.n_groups, self.mesh.n_basis)
        return c[:, 0]

    def cell_integrals(self, row):
        """Apply a functional (length n_dofs) to every cell's flux -> (n_cells,)."""
        per_type = self.type_flux @ row  # (n_types, n_along)
        out = np.zeros(self.grid.n_cells)
        vals = per_type[self.ray_type] * self.ray_weight[:, None]
        out[self.ray_cells.ravel()] = vals.ravel()
        return out

    def removal_density(self, e_lo, e_hi, physics: PhysicsTables):
        """Particles per cm^3 leaving the uncollided beam by scattering while
        slowing from ``e_hi`` to ``e_lo``."""
        if not physics.has_scattering:
            return np.zeros(self.grid.n_cells)
        row = self.mesh.window_weights(e_lo, e_hi, physics.sigma_t)
        return self.rho * self.cell_integrals(row)

    def transformed(self, E, physics: PhysicsTables):
        """rho S(E) psi_u(E) for every cell."""
        g = int(self.mesh.group_of(E))
        P = _legendre_values(self.mesh.order, self.mesh.local_coordinate(g, E))
        row = np.zeros((self.mesh.n_groups, self.mesh.n_basis))
        row[g] = P
        return self.rho * physics.stopping_power(E) * self.cell_integrals(row.ravel())


def group_flux_at(flux: UncollidedFlux, cell: int, E: float) -> float:
    """Uncollided angular fluence of ``cell`` at energy E."""
    return float(flux.mesh.evaluate(flux.cell_coefficients(cell), E))


def initial_spectrum(beam: BeamSource, mesh: EnergyMesh):
    """DG coefficients of the beam spectrum, normalised to one particle."""
    if beam.energy_sd == 0:
        return mesh.project_delta(beam.energy)
    c = mesh.project(beam.spectrum)
    op_particles = np.zeros(mesh.n_dofs)
    op_particles[:: mesh.n_basis] = mesh.widths
    return c / (op_particles @ c)


def trace_all(
    beam: BeamSource,
    density: DensityGrid,
    physics: PhysicsTables,
    mesh: EnergyMesh,
    operator: EnergyOperator = None,
) -> UncollidedFlux:
    """Trace one ray per entry-face cell and tally the uncollided flux."""
    grid = density.grid
    if np.count_nonzero(beam.direction) != 1:
        raise ValueError("only axis-aligned beams are supported")
    if beam.energy > mesh.e_max or beam.e_cutoff < mesh.e_cutoff - 1e-12:
        raise ValueError("energy mesh does not cover the beam spectrum")
    op = operator or EnergyOperator(mesh, physics)
    axis = beam.axis
    fa = beam.face_axes()
    weights = beam.face_weights(grid)
    rho = density.flat
    area = grid.face_area(axis)
    entry = grid.origin[axis] if beam.sign > 0 else grid.origin[axis] + grid.size[axis]

    rays, lengths = [], []
    for i, c0 in enumerate(grid.centers(fa[0])):
        for j, c1 in enumerate(grid.centers(fa[1])):
            p0 = np.zeros(3)
            p0[axis], p0[fa[0]], p0[fa[1]] = entry, c0, c1
            cells, ell = siddon(grid, p0, beam.direction)
            rays.append(cells)
            lengths.append(ell)
    ray_cells = np.array(rays)
    dtau = rho[ray_cells] * np.array(lengths)
    types, ray_type = np.unique(dtau, axis=0, return_inverse=True)
    ray_type = ray_type.ravel()
    ray_weight = weights.ravel()

    n_types, n_along = types.shape
    c = np.tile(initial_spectrum(beam, mesh), (n_types, 1))
    type_flux = np.empty((n_types, n_along, mesh.n_dofs))
    t_csd = np.empty((n_types, n_along))
    t_cut = np.empty((n_types, n_along))
    t_rem = np.empty((n_types, n_along))
    t_rem_e = np.empty((n_types, n_along))
    t_str = np.empty((n_types, n_along))
    injected = c.copy()
    for k in range(n_along):
        for dt in np.unique(types[:, k]):
            sel = types[:, k] == dt
            E1, Phi = op.propagators(dt)
            integ = c[sel] @ Phi.T
            type_flux[sel, k] = integ / (dt * area)
            t_csd[sel, k] = integ @ op.csd_rate
            t_cut[sel, k] = integ @ op.cutoff_rate
            t_rem[sel, k] = integ @ op.removal_rate
            t_rem_e[sel, k] = integ @ op.removal_energy_rate
            t_str[sel, k] = integ @ op.straggle_energy_rate
            c[sel] = c[sel] @ E1.T
        if not np.all(np.isfinite(c)):
            raise SolverError(f"uncollided march produced non-finite values at step {k}")

    # clip negative group averages of the stored flux
    gavg = type_flux[..., :: mesh.n_basis]
    neg = gavg < 0
    clipped = -np.sum(np.where(neg, gavg, 0.0) * mesh.widths, axis=-1)  # (n_types, n_along)
    if np.any(neg):
        mask = np.repeat(neg, mesh.n_basis, axis=-1)
        type_flux[mask] = 0.0

    def scatter_cells(t):
        out = np.zeros(grid.n_cells)
        out[ray_cells.ravel()] = (t[ray_type] * ray_weight[:, None]).ravel()
        return out

    E_cut = mesh.e_cutoff
    w = ray_weight
    tw = np.bincount(ray_type, weights=w, minlength=n_types)
    ledger = {
        "injected_particles": float(tw @ (injected @ op.particles)),
        "injected_energy": float(tw @ (injected @ op.energy)),
        "csd_deposit": float(tw @ t_csd.sum(1)),
        "cutoff_deposit": float(E_cut * (tw @ t_cut.sum(1))),
        "cutoff_particles": float(tw @ t_cut.sum(1)),
        "exit_particles": float(tw @ (c @ op.particles)),
        "exit_energy": float(tw @ (c @ op.energy)),
        "removed_particles": float(tw @ t_rem.sum(1)),
        "removed_energy": float(tw @ t_rem_e.sum(1)),
        "straggling_boundary_energy": float(tw @ t_str.sum(1)),
        "clipped_mass": float(tw @ (clipped * area).sum(1)),
    }
    if ledger["clipped_mass"] > 0:
        log.info("clipped %.3e particles of negative uncollided flux", ledger["clipped_mass"])
    return UncollidedFlux(
        grid=grid,
        mesh=mesh,
        direction=beam.direction,
        rho=rho,
        ray_cells=ray_cells,
        ray_type=ray_type,
        ray_weight=ray_weight,
        type_flux=type_flux,
        csd_deposit=scatter_cells(t_csd),
        cutoff_deposit=E_cut * scatter_cells(t_cut),
        removed_particles=scatter_cells(t_rem),
        ledger=ledger,
    )
