"""Run configuration: TOML files, built-in presets and object construction."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .domain import BeamSource, Box, PhantomSpec, build_phantom
from .exceptions import ConfigError
from .physics import (
    IsotropicScattering,
    NoScattering,
    PhysicsTables,
    bohr_straggling,
    default_stopping_power,
    load_stopping_power,
    load_straggling,
    water_moliere_model,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PRESETS = ("homogeneous-90mev", "heterogeneous-90mev")


@dataclass
class PhysicsConfig:
    stopping_power: str = "builtin"
    straggling: str = "bohr"  # "bohr", "none" or a table path
    scattering: str = "moliere"  # "moliere", "none" or "isotropic:<sigma>"
    correction_degree: object = "auto"  # "auto" -> N + 1, "none", or an int


@dataclass
class SolverConfig:
    kind: str = "lowrank"
    pn: int = 37
    n_groups: int = 128
    order: int = 2
    theta: float = 0.01
    theta_mode: str = "rel"
    r_max: int = 100
    r0: int = 1
    cfl: float = 0.25
    dense_limit: int = 50_000_000


@dataclass
class OutputConfig:
    dir: str = "run"
    normalize: str = "per_particle"


@dataclass
class RunConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    beam: BeamSource = field(default_factory=BeamSource)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    threads: Optional[int] = None
    source: str = "defaults"

    def validate(self):
        s = self.solver
        if s.kind not in ("lowrank", "fullrank", "both"):
            raise ConfigError(f"solver.kind must be lowrank, fullrank or both, not {s.kind!r}")
        if s.pn < 0:
            raise ConfigError("solver.pn must be >= 0")
        if s.n_groups < 1:
            raise ConfigError("solver.n_groups must be >= 1")
        if s.order not in (0, 1, 2):
            raise ConfigError("solver.order must be 0, 1 or 2")
        if s.theta < 0:
            raise ConfigError("solver.theta must be >= 0")
        if s.theta_mode not in ("abs", "rel"):
            raise ConfigError("solver.theta_mode must be abs or rel")
        if not 1 <= s.r0 <= s.r_max:
            raise ConfigError("need 1 <= solver.r0 <= solver.r_max")
        if s.cfl <= 0:
            raise ConfigError("solver.cfl must be positive")
        if self.output.normalize not in ("per_particle", "absolute"):
            raise ConfigError("output.normalize must be per_particle or absolute")
        for key in ("stopping_power", "straggling"):
            value = getattr(self.physics, key)
            if value not in ("builtin", "bohr", "none") and not Path(value).is_file():
                raise ConfigError(f"physics.{key}: file not found: {value}")
        cd = self.physics.correction_degree
        if not (cd in ("auto", "none") or (isinstance(cd, int) and cd >= 0)):
            raise ConfigError("physics.correction_degree must be 'auto', 'none' or an integer >= 0")
        scat = self.physics.scattering
        if not (scat in ("moliere", "none") or scat.startswith("isotropic:")):
            raise ConfigError(f"unknown physics.scattering {scat!r}")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["phantom"]["inserts"] = [dataclasses.asdict(b) if not isinstance(b, dict) else b for b in self.phantom.inserts]
        return d


def _section(cls, data, name):
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def config_from_dict(data: dict, source: str = "<dict>") -> RunConfig:
    data = dict(data)
    known = {"phantom", "beam", "physics", "solver", "output", "threads"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    ph = dict(data.get("phantom", {}))
    try:
        ph["inserts"] = [Box(**b) for b in ph.get("inserts", [])]
    except TypeError as exc:
        raise ConfigError(f"[[phantom.inserts]]: {exc}") from exc
    cfg = RunConfig(
        phantom=_section(PhantomSpec, ph, "phantom"),
        beam=_section(BeamSource, data.get("beam"), "beam"),
        physics=_section(PhysicsConfig, data.get("physics"), "physics"),
        solver=_section(SolverConfig, data.get("solver"), "solver"),
        output=_section(OutputConfig, data.get("output"), "output"),
        threads=data.get("threads"),
        source=source,
    )
    return cfg.validate()


def load_config(path_or_preset: str) -> RunConfig:
    """Read a TOML file, or a built-in preset by name."""
    try:
        if path_or_preset in PRESETS:
            text = resources.files("protondlra").joinpath("data", f"{path_or_preset}.toml").read_text()
            return config_from_dict(tomllib.loads(text), path_or_preset)
        path = Path(path_or_preset)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path_or_preset} (presets: {', '.join(PRESETS)})")
        return config_from_dict(tomllib.loads(path.read_text()), str(path))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path_or_preset}: {exc}") from exc


def apply_overrides(cfg: RunConfig, solver=None, pn=None, theta=None, theta_mode=None, grid=None, out=None, threads=None):
    if solver is not None:
        cfg.solver.kind = solver
    if pn is not None:
        cfg.solver.pn = pn
    if theta is not None:
        cfg.solver.theta = theta
    if theta_mode is not None:
        cfg.solver.theta_mode = theta_mode
    if grid is not None:
        cfg.phantom.shape = tuple(grid)
    if out is not None:
        cfg.output.dir = out
    if threads is not None:
        cfg.threads = threads
    return cfg.validate()


def build_physics(cfg: RunConfig) -> PhysicsTables:
    p = cfg.physics
    stopping = default_stopping_power() if p.stopping_power == "builtin" else load_stopping_power(p.stopping_power)
    if p.straggling == "bohr":
        straggling = bohr_straggling
    elif p.straggling == "none":
        straggling = None
    else:
        straggling = load_straggling(p.straggling)
    if p.scattering == "moliere":
        scattering = water_moliere_model()
    elif p.scattering == "none":
        scattering = NoScattering()
    else:
        scattering = IsotropicScattering(float(p.scattering.split(":", 1)[1]))
    if p.correction_degree == "auto":
        degree = cfg.solver.pn + 1
    elif p.correction_degree == "none":
        degree = None
    else:
        degree = int(p.correction_degree)
    return PhysicsTables(
        stopping,
        straggling,
        scattering,
        e_cutoff=cfg.beam.e_cutoff,
        correction_degree=degree,
        e_max=cfg.beam.e_max,
    )


def build_density(cfg: RunConfig):
    return build_phantom(cfg.phantom)
