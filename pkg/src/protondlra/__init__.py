"""Hybrid collided/uncollided proton transport with a rank-adaptive
dynamical low-rank moment solver."""

__version__ = "0.1.0"

from .analysis import DoseGrid, RankHistory, captured_information, extract_cut, relative_l2
from .config import RunConfig, load_config
from .dlra import BugConfig, LowRankState, RhsSplit, bug_step, truncate
from .domain import BeamSource, DensityGrid, Grid3, PhantomSpec, build_phantom
from .physics import PhysicsTables, PseudoTimeMap, default_stopping_power
from .pn_ops import apply_scatter, apply_upwind_divergence, build_basis, build_flux_matrices
from .raytracer import EnergyMesh, UncollidedFlux, group_flux_at, trace_all
from .solver import (
    CollidedProblem,
    SolveReport,
    assemble_rhs,
    build_problem,
    solve_collided_fullrank,
    solve_collided_lowrank,
)

__all__ = [
    "BeamSource",
    "BugConfig",
    "CollidedProblem",
    "DensityGrid",
    "DoseGrid",
    "EnergyMesh",
    "Grid3",
    "LowRankState",
    "PhantomSpec",
    "PhysicsTables",
    "PseudoTimeMap",
    "RankHistory",
    "RhsSplit",
    "RunConfig",
    "SolveReport",
    "UncollidedFlux",
    "apply_scatter",
    "apply_upwind_divergence",
    "assemble_rhs",
    "bug_step",
    "build_basis",
    "build_flux_matrices",
    "build_phantom",
    "build_problem",
    "captured_information",
    "default_stopping_power",
    "extract_cut",
    "group_flux_at",
    "load_config",
    "relative_l2",
    "solve_collided_fullrank",
    "solve_collided_lowrank",
    "trace_all",
    "truncate",
]
