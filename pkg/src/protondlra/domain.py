"""Voxel grid, density phantom and beam source."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr

AXES = "xyz"
DENSITY_FLOOR = 0.05  # g/cm^3


@dataclass(frozen=True)
class Grid3:
    """Regular Cartesian cell grid.  Arrays are indexed ``[ix, iy, iz]`` and
    flattened in C order."""

    shape: tuple
    spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        spacing = tuple(float(d) for d in self.spacing)
        if len(shape) != 3 or len(spacing) != 3:
            raise ValueError("Grid3 needs three cell counts and three spacings")
        if min(shape) < 1:
            raise ValueError(f"cell counts must be >= 1, got {shape}")
        if min(spacing) <= 0:
            raise ValueError(f"cell sizes must be positive, got {spacing}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @classmethod
    def from_extent(cls, size, shape, origin=(0.0, 0.0, 0.0)):
        return cls(shape, tuple(s / n for s, n in zip(size, shape)), origin)

    @property
    def n_cells(self) -> int:
        return self.shape[0] * self.shape[1] * self.shape[2]

    @property
    def size(self):
        return tuple(n * d for n, d in zip(self.shape, self.spacing))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def face_area(self, axis: int) -> float:
        d = list(self.spacing)
        d.pop(axis)
        return d[0] * d[1]

    def edges(self, axis: int):
        return self.origin[axis] + self.spacing[axis] * np.arange(self.shape[axis] + 1)

    def centers(self, axis: int):
        return self.origin[axis] + self.spacing[axis] * (np.arange(self.shape[axis]) + 0.5)

    def index_along(self, axis: int, coord: float) -> int:
        """Cell index containing ``coord`` under the half-open [lo, hi) rule.

        The upper domain face maps to the last cell.
        """
        lo = self.origin[axis]
        hi = lo + self.shape[axis] * self.spacing[axis]
        if not lo <= coord <= hi:
            raise ValueError(f"{AXES[axis]}={coord} outside domain [{lo}, {hi}]")
        i = int(np.floor((coord - lo) / self.spacing[axis]))
        return min(i, self.shape[axis] - 1)

    def locate(self, point) -> tuple:
        return tuple(self.index_along(a, float(point[a])) for a in range(3))

    def flat_index(self, idx) -> int:
        return int(np.ravel_multi_index(tuple(idx), self.shape))


def hu_to_density(hu, floor: float = DENSITY_FLOOR):
    """Linear HU ramp rho = 1 + HU/1000 [g/cm^3], floored at ``floor``."""
    hu = np.asarray(hu, dtype=float)
    return np.maximum(floor, 1.0 + hu / 1000.0)


@dataclass
class DensityGrid:
    grid: Grid3
    hu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.hu = np.asarray(self.hu, dtype=float).reshape(self.grid.shape)
        self.rho = np.asarray(self.rho, dtype=float).reshape(self.grid.shape)
        if np.any(~(self.rho > 0)):
            raise ValueError("density must be positive everywhere")

    @classmethod
    def from_hu(cls, grid: Grid3, hu, floor: float = DENSITY_FLOOR):
        hu = np.broadcast_to(np.asarray(hu, dtype=float), grid.shape).copy()
        return cls(grid, hu, hu_to_density(hu, floor))

    @classmethod
    def uniform(cls, grid: Grid3, rho: float = 1.0):
        hu = np.full(grid.shape, 1000.0 * (rho - 1.0))
        return cls(grid, hu, np.full(grid.shape, float(rho)))

    @property
    def flat(self):
        return self.rho.ravel()


@dataclass
class Box:
    """Axis-aligned HU override, bounds in cm."""

    lo: Sequence[float]
    hi: Sequence[float]
    hu: float


@dataclass
class PhantomSpec:
    size: Sequence[float] = (2.0, 2.0, 8.0)
    shape: Sequence[int] = (40, 40, 160)
    background_hu: float = 0.0
    inserts: list = field(default_factory=list)
    origin: Sequence[float] = (0.0, 0.0, 0.0)
    density_floor: float = DENSITY_FLOOR

    def __post_init__(self):
        self.size = tuple(float(v) for v in self.size)
        self.shape = tuple(int(v) for v in self.shape)
        self.origin = tuple(float(v) for v in self.origin)
        if len(self.size) != 3 or len(self.shape) != 3 or len(self.origin) != 3:
            raise ValueError("phantom size, shape and origin need three entries")


def build_phantom(spec: PhantomSpec) -> DensityGrid:
    """Assign HU per cell by cell-centre membership in the insert boxes
    (later boxes win) and convert to density."""
    grid = Grid3.from_extent(spec.size, spec.shape, spec.origin)
    hu = np.full(grid.shape, float(spec.background_hu))
    lo_dom = np.array(grid.origin)
    hi_dom = lo_dom + np.array(grid.size)
    centers = [grid.centers(a) for a in range(3)]
    for box in spec.inserts:
        lo = np.asarray(box.lo, dtype=float)
        hi = np.asarray(box.hi, dtype=float)
        if np.any(lo >= hi):
            raise ValueError(f"insert box has empty extent: {lo} .. {hi}")
        eps = 1e-12 * np.maximum(1.0, np.abs(hi_dom))
        if np.any(lo < lo_dom - eps) or np.any(hi > hi_dom + eps):
            raise ValueError(f"insert box {lo}..{hi} extends outside the domain")
        masks = [(c >= l) & (c < h) for c, l, h in zip(centers, lo, hi)]
        sel = np.ix_(*masks)
        hu[sel] = float(box.hu)
    return DensityGrid.from_hu(grid, hu, spec.density_floor)


# ---------------------------------------------------------------------------
# Beam
# ---------------------------------------------------------------------------

_FACES = {"x-": (0, 1), "x+": (0, -1), "y-": (1, 1), "y+": (1, -1), "z-": (2, 1), "z+": (2, -1)}


@dataclass
class BeamSource:
    """Unidirectional Gaussian pencil beam entering through one domain face.

    ``entry`` names the face (``"z-"`` is the low-z face, beam moving in +z).
    ``center`` gives the two in-face coordinates of the beam axis; ``None``
    selects the face centre.
    """

    energy: float = 90.0
    energy_sd: float = 1.0
    sigma: float = 0.3
    weight: float = 1.0
    entry: str = "z-"
    center: Optional[Sequence[float]] = None
    e_cutoff: float = 1.0
    e_max: Optional[float] = None

    def __post_init__(self):
        if self.entry not in _FACES:
            raise ValueError(f"entry face must be one of {sorted(_FACES)}")
        if self.sigma <= 0:
            raise ValueError("beam sigma must be positive")
        if self.energy_sd < 0:
            raise ValueError("energy spread must be non-negative")
        if self.e_max is None:
            self.e_max = self.energy + 5.0 * self.energy_sd + (0.0 if self.energy_sd else 1.0)
        if not self.e_cutoff < self.energy <= self.e_max:
            raise ValueError("beam energy must lie in (e_cutoff, e_max]")

    @property
    def axis(self) -> int:
        return _FACES[self.entry][0]

    @property
    def sign(self) -> int:
        return _FACES[self.entry][1]

    @property
    def direction(self):
        d = np.zeros(3)
        d[self.axis] = self.sign
        return d

    def face_axes(self):
        return tuple(a for a in range(3) if a != self.axis)

    def face_center(self, grid: Grid3):
        if self.center is not None:
            return tuple(float(c) for c in self.center)
        return tuple(grid.origin[a] + 0.5 * grid.size[a] for a in self.face_axes())

    def face_weights(self, grid: Grid3):
        """Particles entering through each entry-face cell: the Gaussian
        profile integrated over the cell face."""
        w = []
        for a, c in zip(self.face_axes(), self.face_center(grid)):
            cdf = ndtr((grid.edges(a) - c) / self.sigma)
            w.append(np.diff(cdf))
        return self.weight * np.outer(w[0], w[1])

    def spectrum_norm(self) -> float:
        """Probability mass of the unit Gaussian inside [e_cutoff, e_max]."""
        if self.energy_sd == 0:
            return 1.0
        z = (np.array([self.e_cutoff, self.e_max]) - self.energy) / self.energy_sd
        return float(ndtr(z[1]) - ndtr(z[0]))

    def spectrum(self, E):
        """Truncated, renormalised energy density [1/MeV] integrating to 1."""
        E = np.asarray(E, dtype=float)
        if self.energy_sd == 0:
            raise ValueError("monoenergetic beam has no spectral density")
        pdf = np.exp(-0.5 * ((E - self.energy) / self.energy_sd) ** 2)
        pdf /= self.energy_sd * np.sqrt(2 * np.pi) * self.spectrum_norm()
        return np.where((E >= self.e_cutoff) & (E <= self.e_max), pdf, 0.0)
