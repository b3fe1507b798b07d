import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.stats import norm

from protondlra.config import load_config
from protondlra.domain import (
    BeamSource,
    Box,
    DensityGrid,
    Grid3,
    PhantomSpec,
    build_phantom,
    hu_to_density,
)


def test_hu_ramp_examples():
    assert hu_to_density(0.0) == 1.0
    assert hu_to_density(-400.0) == pytest.approx(0.6)
    assert hu_to_density(-1000.0) == 0.05
    assert hu_to_density(-1000.0, floor=0.2) == 0.2


def test_homogeneous_spec_is_water():
    d = build_phantom(PhantomSpec())
    assert d.rho.shape == (40, 40, 160)
    assert d.grid.spacing == pytest.approx((0.05, 0.05, 0.05))
    assert np.all(d.rho == 1.0)


def test_heterogeneous_insert_cell_count():
    cfg = load_config("heterogeneous-90mev")
    d = build_phantom(cfg.phantom)
    assert np.count_nonzero(d.rho < 0.99) == 40 * 20 * 40
    assert np.all(d.rho[:, :20, 60:100] == 0.6)
    assert np.all(d.rho[:, 20:, :] == 1.0)


def test_single_cell_grid():
    d = build_phantom(PhantomSpec(size=(1, 1, 1), shape=(1, 1, 1)))
    np.testing.assert_array_equal(d.rho.ravel(), [1.0])


def test_insert_outside_domain_rejected():
    spec = PhantomSpec(inserts=[Box((0, 0, 7), (2, 2, 9), -400)])
    with pytest.raises(ValueError, match="outside"):
        build_phantom(spec)


def test_build_phantom_deterministic():
    spec = PhantomSpec(shape=(8, 8, 16), inserts=[Box((0.3, 0, 1), (1.7, 1.1, 2.9), 300)])
    a, b = build_phantom(spec), build_phantom(spec)
    assert a.rho.tobytes() == b.rho.tobytes()


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid3((0, 1, 1), (1, 1, 1))
    with pytest.raises(ValueError):
        Grid3((1, 1, 1), (1, -1, 1))
    with pytest.raises(ValueError):
        DensityGrid(Grid3((1, 1, 1), (1, 1, 1)), np.zeros(1), np.zeros(1))


def test_half_open_indexing():
    g = Grid3((40, 40, 160), (0.05, 0.05, 0.05))
    assert g.index_along(0, 1.0) == 20
    assert g.index_along(0, 0.99999) == 19
    assert g.index_along(2, 8.0) == 159  # upper face belongs to the last cell
    with pytest.raises(ValueError):
        g.index_along(1, 2.01)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 2.0, allow_nan=False))
def test_index_contains_coordinate(x):
    g = Grid3((40, 1, 1), (0.05, 1, 1))
    i = g.index_along(0, x)
    lo, hi = g.edges(0)[i], g.edges(0)[i + 1]
    assert lo <= x <= hi


def test_face_weights_gaussian_oracle():
    g = Grid3((10, 12, 4), (0.2, 0.2, 0.5))
    beam = BeamSource(sigma=0.3)
    w = beam.face_weights(g)
    assert w.shape == (10, 12)
    cx, cy = 1.0, 1.2
    ex, ey = g.edges(0), g.edges(1)
    px = norm.cdf(ex[4:6], cx, 0.3)
    py = norm.cdf(ey[7:9], cy, 0.3)
    assert w[4, 7] == pytest.approx((px[1] - px[0]) * (py[1] - py[0]), rel=1e-12)
    total = (norm.cdf(2.0, cx, 0.3) - norm.cdf(0.0, cx, 0.3)) * (norm.cdf(2.4, cy, 0.3) - norm.cdf(0.0, cy, 0.3))
    assert w.sum() == pytest.approx(total, rel=1e-12)


def test_spectrum_normalised():
    beam = BeamSource(energy=90.0, energy_sd=1.0)
    val, _ = quad(beam.spectrum, beam.e_cutoff, beam.e_max, points=[90.0])
    assert val == pytest.approx(1.0, rel=1e-9)
    assert beam.e_max == pytest.approx(95.0)


def test_beam_faces():
    assert list(BeamSource(entry="x+").direction) == [-1.0, 0.0, 0.0]
    assert BeamSource(entry="y-").face_axes() == (0, 2)
    with pytest.raises(ValueError):
        BeamSource(entry="w+")
    with pytest.raises(ValueError):
        BeamSource(sigma=0.0)
