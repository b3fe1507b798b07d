import numpy as np
import pytest
import scipy.special as sps
from hypothesis import given, settings
from hypothesis import strategies as st

from protondlra.domain import DensityGrid, Grid3
from protondlra.physics import IsotropicScattering, PhysicsTables, default_stopping_power, water_moliere_model
from protondlra.pn_ops import (
    FOUR_PI,
    ScatterOperator,
    SHBasis,
    UpwindStencil,
    apply_scatter,
    apply_upwind_divergence,
    beam_moments,
    boundary_outflow,
    build_basis,
    build_flux_matrices,
    n_moments,
)


def _unit(theta, phi):
    return np.array([[np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)]])


def _scipy_real(l, m, theta, phi):
    # real harmonics without the Condon-Shortley phase, from the complex ones
    Y = sps.sph_harm_y(l, abs(m), theta, phi)
    if m == 0:
        return Y.real
    return np.sqrt(2.0) * (-1.0) ** abs(m) * (Y.real if m > 0 else Y.imag)


# --- basis ----------------------------------------------------------------------


def test_sizes():
    assert n_moments(0) == 1
    assert build_basis(37).size == 1444
    assert build_basis(95).size == 96**2
    with pytest.raises(ValueError):
        SHBasis(-1)


def test_degree_zero_constant(rng):
    b = build_basis(0)
    om = rng.normal(size=(5, 3))
    om /= np.linalg.norm(om, axis=1)[:, None]
    np.testing.assert_allclose(b.evaluate(om), 1.0 / np.sqrt(FOUR_PI))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, np.pi), st.floats(-np.pi, np.pi))
def test_matches_scipy_harmonics(theta, phi):
    b = build_basis(6)
    vals = b.evaluate(_unit(theta, phi))[0]
    ref = [_scipy_real(l, m, theta, phi) for l, m in zip(b.degrees, b.orders)]
    np.testing.assert_allclose(vals, ref, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, np.pi), st.floats(-np.pi, np.pi))
def test_addition_theorem(theta, phi):
    # sum_m m_l^m(w)^2 = (2l+1)/(4 pi) for every degree
    b = build_basis(10)
    v = b.evaluate(_unit(theta, phi))[0] ** 2
    sums = np.bincount(b.degrees, weights=v)
    np.testing.assert_allclose(sums, (2 * np.arange(11) + 1) / FOUR_PI, rtol=1e-12)


@pytest.mark.parametrize("N", [0, 1, 4, 9])
def test_gram_identity(N):
    b = build_basis(N)
    om, w = b.quadrature(2 * N + 2)
    M = b.evaluate(om)
    np.testing.assert_allclose((M * w[:, None]).T @ M, np.eye(b.size), atol=1e-10)


def test_beam_moments_along_z():
    b = build_basis(3)
    m = beam_moments(b, [0, 0, 2.0])
    # only m = 0 harmonics are nonzero on the pole; value sqrt((2l+1)/(4 pi))
    for l in range(4):
        assert m[b.index(l, 0)] == pytest.approx(np.sqrt((2 * l + 1) / FOUR_PI))
    assert np.count_nonzero(np.abs(m) > 1e-14) == 4


# --- flux matrices ------------------------------------------------------------------


def test_degree_zero_matrix_is_zero():
    fm = build_flux_matrices(build_basis(0))
    for A in fm.A:
        np.testing.assert_array_equal(A, [[0.0]])


def test_p1_coupling_entry():
    b = build_basis(1)
    fm = build_flux_matrices(b)
    assert fm.A[2][b.index(0, 0), b.index(1, 0)] == pytest.approx(1 / np.sqrt(3), rel=1e-14)


@pytest.mark.parametrize("N", [1, 3, 7])
def test_matrices_against_brute_force_quadrature(N):
    b = build_basis(N)
    fm = build_flux_matrices(b)
    om, w = b.quadrature(2 * N + 4)
    M = b.evaluate(om)
    for i in range(3):
        ref = (M * (w * om[:, i])[:, None]).T @ M
        np.testing.assert_allclose(fm.A[i], ref, atol=1e-12)


@pytest.mark.parametrize("N", [2, 7, 15])
def test_split_invariants(N):
    fm = build_flux_matrices(build_basis(N))
    for i in range(3):
        A, P, Mn = fm.A[i], fm.plus[i], fm.minus[i]
        np.testing.assert_allclose(A, A.T, atol=0)
        np.testing.assert_allclose(P + Mn, A, atol=1e-13)
        assert np.max(np.abs(fm.eigvals[i])) <= 1.0 + 1e-12
        assert np.linalg.eigvalsh(P).min() > -1e-12
        assert np.linalg.eigvalsh(Mn).max() < 1e-12
        assert np.linalg.eigvalsh(fm.absolute(i)).min() > -1e-12


# --- scattering -----------------------------------------------------------------------


def _scatter_op(model, N, E=50.0, degree=None):
    phys = PhysicsTables(default_stopping_power(), scattering=model, correction_degree=degree)
    s, G, _ = phys.moments(E, N)
    return ScatterOperator(build_basis(N), [0.0], [s], [G])


def test_scatter_conserves_degree_zero(rng):
    op = _scatter_op(water_moliere_model(), 4, degree=5)
    u = rng.normal(size=(7, op.basis.size))
    out = apply_scatter(u, op, 0)
    np.testing.assert_allclose(out[:, 0], 0.0, atol=1e-12 * np.abs(u).max())


def test_isotropic_scatter_damps_higher_moments(rng):
    op = _scatter_op(IsotropicScattering(2.5), 3)
    u = rng.normal(size=(4, op.basis.size))
    out = apply_scatter(u, op, 0)
    np.testing.assert_allclose(out[:, 1:], -2.5 * u[:, 1:], rtol=1e-10)


def test_scatter_dense_oracle_and_sign(rng):
    op = _scatter_op(water_moliere_model(), 5, E=90.0, degree=6)
    u = rng.normal(size=(9, op.basis.size))
    D = np.diag(-op.sigma_t[0] + op.G[0][op.basis.degrees])
    np.testing.assert_allclose(apply_scatter(u, op, 0), u @ D, rtol=1e-13)
    assert np.all(np.diag(D) <= 0)


def test_scatter_shape_check():
    with pytest.raises(ValueError):
        ScatterOperator(build_basis(2), [0.0, 1.0], [1.0, 1.0], np.zeros((2, 2)))


# --- upwind divergence ------------------------------------------------------------------


def _setup(shape, N=2, size=None):
    size = size or shape
    g = Grid3.from_extent(size, shape)
    return g, DensityGrid.uniform(g), build_flux_matrices(build_basis(N))


def _interior(g, margin=3):
    idx = np.indices(g.shape).reshape(3, -1)
    ok = np.ones(g.n_cells, bool)
    for a in range(3):
        ok &= (idx[a] >= margin) & (idx[a] < g.shape[a] - margin)
    return ok


def test_zero_field_zero_output():
    g, d, fm = _setup((4, 4, 6))
    out = apply_upwind_divergence(np.zeros((g.n_cells, fm.size)), d, fm)
    assert np.all(out == 0)
    assert boundary_outflow(np.zeros((g.n_cells, fm.size)), d, fm) == 0


def test_constant_field_interior_zero(rng):
    g, d, fm = _setup((8, 8, 8))
    c = rng.normal(size=fm.size)
    out = apply_upwind_divergence(np.tile(c, (g.n_cells, 1)), d, fm)
    assert np.max(np.abs(out[_interior(g, 2)])) < 1e-12


def test_linear_field_exact(rng):
    g, d, fm = _setup((7, 7, 9), N=3, size=(1.4, 1.4, 1.8))
    slope = rng.normal(size=(3, fm.size))
    X = np.stack(np.meshgrid(*[g.centers(a) for a in range(3)], indexing="ij"), -1).reshape(-1, 3)
    u = 0.3 + X @ slope
    out = apply_upwind_divergence(u, d, fm)
    exact = -sum(np.outer(np.ones(g.n_cells), slope[i] @ fm.A[i]) for i in range(3))
    ok = _interior(g, 2)
    np.testing.assert_allclose(out[ok], exact[ok], atol=1e-12)


def test_divides_by_density(rng):
    g, d, fm = _setup((5, 5, 5))
    rho = rng.uniform(0.5, 1.5, g.n_cells)
    dens = DensityGrid(g, np.zeros(g.shape), rho)
    u = rng.normal(size=(g.n_cells, fm.size))
    np.testing.assert_allclose(
        apply_upwind_divergence(u, dens, fm), apply_upwind_divergence(u / rho[:, None], d, fm), rtol=1e-13
    )


def test_second_order_convergence():
    errs = []
    for n in (16, 32, 64):
        g, d, fm = _setup((6, 6, n), N=2, size=(1.0, 1.0, 1.0))
        z = np.broadcast_to(g.centers(2), g.shape).ravel()
        coef = np.linspace(1.0, 2.0, fm.size)
        u = np.outer(np.sin(2 * np.pi * z), coef)
        exact = -np.outer(2 * np.pi * np.cos(2 * np.pi * z), coef @ fm.A[2])
        out = apply_upwind_divergence(u, d, fm)
        iz = np.indices(g.shape)[2].ravel()
        ix = np.indices(g.shape)[0].ravel()
        iy = np.indices(g.shape)[1].ravel()
        # z-interior and away from the x/y boundary stencils
        ok = (iz >= 3) & (iz < n - 3) & (ix >= 2) & (ix < 4) & (iy >= 2) & (iy < 4)
        errs.append(np.sqrt(np.mean((out[ok] - exact[ok]) ** 2)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(orders - 2.0) <= 0.3), orders


def test_outflow_matches_divergence_sum(rng):
    # finite-volume telescoping: sum of cell divergences = -(boundary outflow)
    g, d, fm = _setup((4, 5, 6), N=2, size=(0.8, 1.0, 1.2))
    u = rng.normal(size=(g.n_cells, fm.size))
    div = apply_upwind_divergence(u, d, fm)
    total = np.sqrt(FOUR_PI) * div[:, 0].sum() * g.cell_volume
    assert total == pytest.approx(-boundary_outflow(u, d, fm), rel=1e-12)


def test_stencil_reuse_consistent(rng):
    g, d, fm = _setup((3, 4, 5))
    st_ = UpwindStencil(g)
    u = rng.normal(size=(g.n_cells, fm.size))
    np.testing.assert_array_equal(apply_upwind_divergence(u, d, fm, st_), apply_upwind_divergence(u, d, fm))
