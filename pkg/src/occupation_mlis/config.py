"""Experiment configuration: a YAML tree with every default filled in."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Union

import yaml

from .errors import ConfigError


@dataclass
class ModelConfig:
    kind: str = "rice"
    k: float = 0.25
    theta: float = 0.2
    beta: float = 0.375
    i0: float = 1.0
    q0: float = 1.0


@dataclass
class ProblemConfig:
    T: float = 5.0
    gamma_th: float = 0.25
    w: float = 3.58


@dataclass
class SmoothingConfig:
    enabled: bool = False
    c: float = 0.5
    d: float = 0.125


@dataclass
class SolverConfig:
    P: int = 160
    schedule: List[int] = field(default_factory=lambda: [40, 80, 160, 320, 640])
    x_max: Optional[float] = None
    z_substeps: int = 2
    v_floor: float = 1e-12
    zeta_max: float = 50.0
    # largest P solved for planning probes; finer variances are extrapolated
    max_pilot_P: int = 320
    resolutions: List[int] = field(default_factory=lambda: [40, 80, 160])


@dataclass
class EstimatorConfig:
    variant: str = "slis"
    N: int = 256
    N0: int = 20
    M: Optional[Union[int, List[int]]] = 10000
    l0: Optional[int] = None
    L: Optional[int] = None
    TOL: List[float] = field(default_factory=lambda: [0.1])
    seed: int = 20240601
    pilot_M: int = 10000
    pilot_N: int = 160
    max_level: int = 6


@dataclass
class CostConfig:
    C_SDE: float = 1.3e-7
    C_b: float = 0.02
    C_PDE: float = 7e-7
    C: float = 1.96


@dataclass
class SweepConfig:
    name: str = "slis_variance"
    kind: str = "slis_variance"  # slis_variance | level_stats
    P: List[int] = field(default_factory=lambda: [40, 320])
    N: List[int] = field(default_factory=lambda: [32, 64, 128, 256, 512, 1024])
    M: int = 10000
    coupling: str = "cl"
    smooth: Optional[bool] = None


@dataclass
class OutputConfig:
    dir: str = "out"
    grid_format: str = "binary"


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    rates: List[SweepConfig] = field(default_factory=lambda: [SweepConfig()])
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


_SECTIONS = {"model": ModelConfig, "problem": ProblemConfig, "smoothing": SmoothingConfig,
             "solver": SolverConfig,
             "estimator": EstimatorConfig, "cost": CostConfig, "output": OutputConfig}


def _section(cls, raw, where):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where!r}: {sorted(unknown)}")
    return cls(**raw)


def from_dict(raw: Optional[dict]) -> ExperimentConfig:
    raw = dict(raw or {})
    unknown = set(raw) - set(_SECTIONS) - {"rates"}
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    parts = {name: _section(cls, raw.get(name), name) for name, cls in _SECTIONS.items()}
    sweeps = raw.get("rates")
    if sweeps is None:
        parts["rates"] = [SweepConfig()]
    elif isinstance(sweeps, list):
        parts["rates"] = [_section(SweepConfig, s, "rates") for s in sweeps]
    else:
        raise ConfigError("'rates' must be a list of sweeps")
    cfg = ExperimentConfig(**parts)
    validate(cfg)
    return cfg


def load(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    return from_dict(raw)


def validate(cfg: ExperimentConfig) -> None:
    if cfg.model.kind != "rice":
        raise ConfigError(f"unknown model kind {cfg.model.kind!r}")
    if not 0 < cfg.problem.w < cfg.problem.T:
        raise ConfigError("problem.w must lie in (0, T)")
    if not (cfg.smoothing.c > 0 and cfg.smoothing.d > 0):
        raise ConfigError("smoothing.c and smoothing.d must be positive")
    if cfg.estimator.variant not in ("mc", "slis", "mlmc", "mlis-sll", "mlis-cl"):
        raise ConfigError(f"unknown estimator variant {cfg.estimator.variant!r}")
    if not 0 <= cfg.estimator.seed < 2**64:
        raise ConfigError("seed must fit in 64 unsigned bits")
    if any(t <= 0 for t in cfg.estimator.TOL):
        raise ConfigError("tolerances must be positive")
    if cfg.solver.P < 8 or any(p < 8 for p in cfg.solver.schedule):
        raise ConfigError("grid resolutions must be at least 8")
    if cfg.output.grid_format not in ("binary", "csv"):
        raise ConfigError("output.grid_format must be 'binary' or 'csv'")
    for s in cfg.rates:
        if s.kind not in ("slis_variance", "level_stats"):
            raise ConfigError(f"unknown sweep kind {s.kind!r}")
        if s.coupling not in ("none", "sll", "cl"):
            raise ConfigError(f"unknown coupling {s.coupling!r}")
