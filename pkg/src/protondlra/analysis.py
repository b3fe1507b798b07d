"""Dose fields, comparisons, rank reports and file output."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import AXES, Grid3


@dataclass
class DoseGrid:
    """Deposited energy per cell [MeV], split into collided and uncollided
    parts.  ``normalization`` is the number of particles the values are
    divided by (1 for absolute totals)."""

    grid: Grid3
    collided: np.ndarray
    uncollided: np.ndarray
    normalization: float = 1.0

    def __post_init__(self):
        self.collided = np.asarray(self.collided, dtype=float).reshape(self.grid.shape)
        self.uncollided = np.asarray(self.uncollided, dtype=float).reshape(self.grid.shape)
        if not (np.all(np.isfinite(self.collided)) and np.all(np.isfinite(self.uncollided))):
            raise ValueError("dose contains non-finite values")

    @property
    def total(self):
        return self.collided + self.uncollided

    def per_particle(self, weight: float) -> "DoseGrid":
        if weight <= 0:
            return DoseGrid(self.grid, self.collided, self.uncollided, self.normalization)
        return DoseGrid(self.grid, self.collided / weight, self.uncollided / weight, self.normalization * weight)

    def fields(self):
        return {"total": self.total, "collided": self.collided, "uncollided": self.uncollided}


@dataclass
class RankHistory:
    steps: list = field(default_factory=list)
    t: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    rank: list = field(default_factory=list)
    sigma: list = field(default_factory=list)

    def append(self, step, t, energy, rank, sigma=()):
        if self.steps and step <= self.steps[-1]:
            raise ValueError("rank history steps must increase")
        if rank < 1:
            raise ValueError("rank must be >= 1")
        self.steps.append(int(step))
        self.t.append(float(t))
        self.energy.append(float(energy))
        self.rank.append(int(rank))
        self.sigma.append(np.asarray(sigma, dtype=float))

    def __len__(self):
        return len(self.steps)

    @property
    def ranks(self):
        return np.array(self.rank, dtype=int)


def _check_same_grid(a: DoseGrid, b: DoseGrid):
    if a.grid != b.grid:
        raise ValueError(f"grid mismatch: {a.grid} vs {b.grid}")


def relative_l2(a: DoseGrid, b: DoseGrid) -> float:
    """||a - b||_2 / ||b||_2 of the total dose."""
    _check_same_grid(a, b)
    nb = np.linalg.norm(b.total)
    diff = np.linalg.norm(a.total - b.total)
    if nb == 0:
        return 0.0 if diff == 0 else float("inf")
    return float(diff / nb)


def compare_doses(a: DoseGrid, b: DoseGrid) -> dict:
    """Relative L2, max abs difference and peak-position offset (cells)."""
    _check_same_grid(a, b)
    ia = np.unravel_index(np.argmax(a.total), a.grid.shape)
    ib = np.unravel_index(np.argmax(b.total), b.grid.shape)
    return {
        "relative_l2": relative_l2(a, b),
        "max_abs_difference": float(np.max(np.abs(a.total - b.total))),
        "peak_offset_cells": [int(x - y) for x, y in zip(ia, ib)],
    }


@dataclass
class CutProfile:
    """Dose sampled at cell centres; ``coords`` holds one array per free axis."""

    axes: tuple
    coords: tuple
    values: np.ndarray


def extract_cut(dose: DoseGrid, kind: str, coords, field_name: str = "total", axis: int = 2) -> CutProfile:
    """Cut through the dose.

    ``kind="longitudinal"``: line along ``axis`` through the two remaining
    coordinates ``coords``.  ``kind="lateral"``: with one coordinate, the
    plane at that value of the first transverse axis (e.g. y = 1 for a beam
    along z gives an x-z plane); with two, the line along the other
    transverse axis at (transverse coordinate, depth).  Coordinates map to
    cells by the half-open rule.
    """
    g = dose.grid
    data = dose.fields()[field_name]
    others = [a for a in range(3) if a != axis]
    coords = list(np.atleast_1d(coords).astype(float))
    if kind == "longitudinal":
        if len(coords) != 2:
            raise ValueError("longitudinal cut needs two transverse coordinates")
        idx = [slice(None)] * 3
        for a, c in zip(others, coords):
            idx[a] = g.index_along(a, c)
        return CutProfile((AXES[axis],), (g.centers(axis),), data[tuple(idx)].copy())
    if kind == "lateral":
        fixed_axis = others[1]
        free_axis = others[0]
        idx = [slice(None)] * 3
        idx[fixed_axis] = g.index_along(fixed_axis, coords[0])
        if len(coords) == 1:
            return CutProfile(
                (AXES[free_axis], AXES[axis]),
                (g.centers(free_axis), g.centers(axis)),
                data[tuple(idx)].copy(),
            )
        if len(coords) == 2:
            idx[axis] = g.index_along(axis, coords[1])
            return CutProfile((AXES[free_axis],), (g.centers(free_axis),), data[tuple(idx)].copy())
        raise ValueError("lateral cut needs one or two coordinates")
    raise ValueError(f"unknown cut kind {kind!r}")


def depth_dose(dose: DoseGrid, axis: int = 2, field_name: str = "total"):
    """Laterally integrated dose along ``axis`` with cell-centre depths."""
    data = dose.fields()[field_name]
    others = tuple(a for a in range(3) if a != axis)
    return dose.grid.centers(axis), data.sum(axis=others)


def captured_information(sigma, k: int) -> float:
    """Percentage of sum sigma_j^2 held by the leading k values."""
    s2 = np.asarray(sigma, dtype=float) ** 2
    if not 0 <= k <= s2.size:
        raise ValueError(f"k={k} outside [0, {s2.size}]")
    total = s2.sum()
    if total == 0:
        return 100.0
    return float(100.0 * s2[:k].sum() / total)


def negative_dose_stats(dose: DoseGrid) -> dict:
    t = dose.total
    neg = t[t < 0]
    abs_sum = np.abs(t).sum()
    return {
        "min": float(t.min()),
        "negative_cells": int(neg.size),
        "negative_mass_fraction": float(-neg.sum() / abs_sum) if abs_sum > 0 else 0.0,
    }


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def write_vtk(path, grid: Grid3, fields: dict):
    """Legacy binary STRUCTURED_POINTS file with cell data (big-endian doubles)."""
    path = Path(path)
    nx, ny, nz = grid.shape
    head = (
        "# vtk DataFile Version 3.0\n"
        "dose\n"
        "BINARY\n"
        "DATASET STRUCTURED_POINTS\n"
        f"DIMENSIONS {nx + 1} {ny + 1} {nz + 1}\n"
        f"ORIGIN {grid.origin[0]!r} {grid.origin[1]!r} {grid.origin[2]!r}\n"
        f"SPACING {grid.spacing[0]!r} {grid.spacing[1]!r} {grid.spacing[2]!r}\n"
        f"CELL_DATA {grid.n_cells}\n"
    )
    with open(path, "wb") as fh:
        fh.write(head.encode("ascii"))
        for name, arr in fields.items():
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n".encode("ascii"))
            data = np.asarray(arr, dtype=">f8").reshape(grid.shape)
            fh.write(data.ravel(order="F").tobytes())
            fh.write(b"\n")


def read_vtk(path):
    """Read files produced by :func:`write_vtk` -> (Grid3, {name: array})."""
    raw = Path(path).read_bytes()
    pos = 0

    def line():
        nonlocal pos
        end = raw.index(b"\n", pos)
        s = raw[pos:end].decode("ascii")
        pos = end + 1
        return s

    for _ in range(4):
        line()
    dims = [int(v) - 1 for v in line().split()[1:]]
    origin = [float(v) for v in line().split()[1:]]
    spacing = [float(v) for v in line().split()[1:]]
    n = int(line().split()[1])
    grid = Grid3(tuple(dims), tuple(spacing), tuple(origin))
    fields = {}
    while pos < len(raw):
        hdr = line()
        if not hdr.strip():
            continue
        name = hdr.split()[1]
        line()
        data = np.frombuffer(raw[pos : pos + 8 * n], dtype=">f8")
        pos += 8 * n + 1
        fields[name] = data.reshape(grid.shape, order="F").astype(float)
    return grid, fields


def write_raw(path, grid: Grid3, array, name: str):
    """Little-endian float64 blob in C order of [ix, iy, iz] plus a JSON
    sidecar ``<path>.json``."""
    path = Path(path)
    np.asarray(array, dtype="<f8").reshape(grid.shape).tofile(path)
    meta = {
        "field": name,
        "dims": list(grid.shape),
        "spacing": list(grid.spacing),
        "origin": list(grid.origin),
        "dtype": "float64",
        "byte_order": "little",
        "index_order": "C [ix, iy, iz]",
        "units": "MeV",
    }
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2))


def read_raw(path):
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    grid = Grid3(tuple(meta["dims"]), tuple(meta["spacing"]), tuple(meta["origin"]))
    return grid, np.fromfile(path, dtype="<f8").reshape(grid.shape), meta


def write_rank_history(path, history: RankHistory):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "t", "energy", "rank", "singular_values"])
        for s, t, e, r, sig in zip(history.steps, history.t, history.energy, history.rank, history.sigma):
            w.writerow([s, repr(t), repr(e), r, " ".join(repr(float(x)) for x in sig)])


def read_rank_history(path) -> RankHistory:
    h = RankHistory()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            sig = [float(x) for x in row["singular_values"].split()]
            h.append(int(row["step"]), float(row["t"]), float(row["energy"]), int(row["rank"]), sig)
    return h


def write_profile(path, profile: CutProfile):
    """Delimited text; 2D cuts are written as (coord_a, coord_b, value) rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(profile.axes) + ["dose"])
        if len(profile.axes) == 1:
            for c, v in zip(profile.coords[0], profile.values):
                w.writerow([repr(float(c)), repr(float(v))])
        else:
            for i, a in enumerate(profile.coords[0]):
                for j, b in enumerate(profile.coords[1]):
                    w.writerow([repr(float(a)), repr(float(b)), repr(float(profile.values[i, j]))])
