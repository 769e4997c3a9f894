"""Experiment configuration: a YAML file validated by pydantic models.

Every section rejects unknown keys.  Key reference (all sections optional
unless noted)::

    master_seed: 2024
    output_dir: out
    workers: 1
    model: bounded_ou            # registry id, or use `tabular` instead
    tabular:                     # grid-free fixture MDP
      h: 0.1
      P: [[[0.9, 0.1], [0.2, 0.8]]]     # P[a][i][j]
      stage_cost: [[0.1], [0.0]]        # c_h[i][a]
    h: 0.1                       # single-period commands
    h_list: [0.2, 0.1, 0.05]     # sweep / coupling / invariant experiment
    alpha: 1.0
    x0: [0.0]
    grid: {box: [[-4, 4]], counts: [73]}   # counts default to the spacing rule
    actions: {counts: [5]}                 # default: benchmark action net
    kernel: {estimator: mc, samples: 20000, substeps: 4, rule: exact, file: null}
    solver: {vi_tol: 1.0e-8, rvi_tol: 1.0e-10, anchor_x: null, max_iter: 1000000}
    rollout: {policy: discounted, solution: null, dt_ratio: 16, replications: 2000,
              tol: 1.0e-3, horizon: null, erg_T: 100, erg_burn_in: 5, erg_replications: 200}
    coupling: {policy: lipschitz, horizon: 2.0, replications: 10000, dt_ratio: 16}
    certificate: {kind: cosh, scale: 0.5, C0: 0.25, C1: 0.15, K: [[-2, 2]]}
    invariant: {T: 10000, burn_in: 10, replicas: 100, spacing: 0.05,
                estimator: quadrature, dt_ratio: 16}

The sweep fills its coupling_Z column only when a `coupling` section is
present, and the lyapunov command runs the invariant-measure experiment only
when an `invariant` section is present.

Relative file paths are resolved against the config file's directory.
"""
from __future__ import annotations

import hashlib
import math
from pathlib import Path
from typing import List, Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .benchmarks import REGISTRY, cosh_function, get_benchmark, lipschitz_policy
from .errors import ConfigError
from .lyapunov import LyapunovCertificate
from .mdp import ActionNet, Grid, SampledMdp, build_action_net, build_grid, default_counts
from .sde import DiffusionModel, SmoothFunction


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TabularSpec(_Section):
    h: float = Field(gt=0)
    P: List[List[List[float]]]
    stage_cost: List[List[float]]


class GridSpec(_Section):
    box: List[List[float]]
    counts: Optional[List[int]] = None


class ActionSpec(_Section):
    counts: List[int]


class KernelSpec(_Section):
    estimator: Literal["mc", "quadrature"] = "mc"
    samples: int = Field(20000, gt=0)
    substeps: int = Field(4, gt=0)
    rule: Literal["exact", "gauss_hermite"] = "exact"
    file: Optional[str] = None


class SolverSpec(_Section):
    vi_tol: float = Field(1e-8, gt=0)
    rvi_tol: float = Field(1e-10, gt=0)
    anchor_x: Optional[List[float]] = None
    max_iter: int = Field(10**6, gt=0)


class RolloutSpec(_Section):
    policy: Literal["discounted", "average", "lipschitz"] = "discounted"
    solution: Optional[str] = None
    dt_ratio: int = Field(16, gt=0)
    replications: int = Field(2000, gt=0)
    tol: float = Field(1e-3, gt=0)
    horizon: Optional[float] = Field(None, gt=0)
    erg_T: float = Field(100.0, gt=0)
    erg_burn_in: float = Field(5.0, ge=0)
    erg_replications: int = Field(200, gt=0)


class CouplingSpec(_Section):
    policy: Literal["lipschitz"] = "lipschitz"
    horizon: float = Field(2.0, gt=0)  # N h, held fixed across h_list
    replications: int = Field(10000, gt=0)
    dt_ratio: int = Field(16, gt=0)


class CertificateSpec(_Section):
    kind: Literal["cosh", "zero"] = "cosh"
    scale: float = Field(0.5, gt=0)
    C0: float = Field(0.25, ge=0)
    C1: float = Field(0.15, gt=0)
    K: List[List[float]] = [[-2.0, 2.0]]


class InvariantSpec(_Section):
    T: float = Field(1e4, gt=0)
    burn_in: float = Field(10.0, ge=0)
    replicas: int = Field(100, gt=0)
    spacing: Optional[float] = Field(None, gt=0)
    estimator: Literal["mc", "quadrature"] = "quadrature"
    dt_ratio: int = Field(16, gt=0)


class ExperimentConfig(_Section):
    master_seed: int = 0
    output_dir: str = "."
    workers: int = Field(1, gt=0)
    model: Optional[str] = None
    tabular: Optional[TabularSpec] = None
    h: Optional[float] = Field(None, gt=0)
    h_list: Optional[List[float]] = None
    alpha: float = Field(1.0, gt=0)
    x0: Optional[List[float]] = None
    grid: Optional[GridSpec] = None
    actions: Optional[ActionSpec] = None
    kernel: KernelSpec = KernelSpec()
    solver: SolverSpec = SolverSpec()
    rollout: RolloutSpec = RolloutSpec()
    coupling: CouplingSpec = CouplingSpec()
    certificate: Optional[CertificateSpec] = None
    invariant: InvariantSpec = InvariantSpec()

    @field_validator("model")
    @classmethod
    def _known_model(cls, v):
        if v is not None and v not in REGISTRY:
            raise ValueError(f"unknown model {v!r}; known: {sorted(REGISTRY)}")
        return v

    @field_validator("h_list")
    @classmethod
    def _decreasing(cls, v):
        if v is not None:
            if not v or any(h <= 0 for h in v):
                raise ValueError("h_list must be a nonempty list of positive periods")
            if any(b >= a for a, b in zip(v, v[1:])):
                raise ValueError("h_list must be strictly decreasing")
        return v

    @model_validator(mode="after")
    def _one_model(self):
        if (self.model is None) == (self.tabular is None):
            raise ValueError("exactly one of `model` and `tabular` is required")
        return self


def _format_errors(path, err: ValidationError) -> str:
    lines = [f"{path}: invalid configuration"]
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"  {loc}: {e['msg']}")
    return "\n".join(lines)


class LoadedConfig:
    """Validated config plus the file it came from."""

    def __init__(self, cfg: ExperimentConfig, path: Path, raw: bytes):
        self.cfg = cfg
        self.path = path
        self.sha256 = hashlib.sha256(raw).hexdigest()

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else (self.path.parent / p)

    def has(self, key: str) -> bool:
        return key in self.cfg.model_fields_set

    def require_file(self, rel: str, key: str) -> Path:
        p = self.resolve(rel)
        if not p.is_file():
            raise ConfigError(f"{self.path}: {key}: file {p} does not exist")
        return p


def load_config(path, seed: Optional[int] = None) -> LoadedConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: YAML parse error: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if seed is not None:
        data["master_seed"] = seed
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(path, exc)) from None
    return LoadedConfig(cfg, path, raw)


# ---- builders -------------------------------------------------------------


def build_model(cfg: ExperimentConfig) -> DiffusionModel:
    if cfg.model is None:
        raise ConfigError("model: this command needs a diffusion model, not a tabular fixture")
    return get_benchmark(cfg.model).factory()


def require_h(cfg: ExperimentConfig) -> float:
    if cfg.tabular is not None:
        return cfg.tabular.h
    if cfg.h is not None:
        return cfg.h
    if cfg.h_list:
        return cfg.h_list[-1]
    raise ConfigError("h: missing sampling period")


def require_h_list(cfg: ExperimentConfig) -> list:
    if not cfg.h_list:
        raise ConfigError("h_list: required for this command")
    return list(cfg.h_list)


def state_box(cfg: ExperimentConfig, model: DiffusionModel) -> np.ndarray:
    if cfg.grid is not None:
        return np.asarray(cfg.grid.box, dtype=float)
    if model.state_box is None:
        raise ConfigError("grid.box: required for models without a state box")
    return model.state_box


def build_grid_for(cfg: ExperimentConfig, model: DiffusionModel, h: float) -> Grid:
    box = state_box(cfg, model)
    counts = cfg.grid.counts if cfg.grid is not None and cfg.grid.counts else default_counts(model, box, h)
    return build_grid(box, counts)


def action_counts(cfg: ExperimentConfig) -> tuple:
    return tuple(cfg.actions.counts) if cfg.actions is not None else get_benchmark(cfg.model).action_counts


def build_actions_for(cfg: ExperimentConfig, model: DiffusionModel) -> ActionNet:
    return build_action_net(model.control_box, action_counts(cfg))


def tabular_mdp(cfg: ExperimentConfig) -> SampledMdp:
    t = cfg.tabular
    try:
        return SampledMdp.from_arrays(np.asarray(t.P, dtype=float), np.asarray(t.stage_cost, dtype=float),
                                      t.h, cfg.alpha)
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"tabular: {exc}") from None


def tabular_grid(cfg: ExperimentConfig, n_states: int) -> Optional[Grid]:
    """Optional 1-D grid labelling tabular states (used by the drift checks)."""
    if cfg.grid is None:
        return None
    grid = build_grid(cfg.grid.box, cfg.grid.counts or [n_states])
    if grid.size != n_states:
        raise ConfigError(f"grid: {grid.size} nodes but the tabular kernel has {n_states} states")
    return grid


def x0_of(cfg: ExperimentConfig, dim: int) -> np.ndarray:
    x0 = np.zeros(dim) if cfg.x0 is None else np.asarray(cfg.x0, dtype=float)
    if x0.shape != (dim,):
        raise ConfigError(f"x0: expected {dim} coordinates")
    return x0


def _zero_function() -> SmoothFunction:
    return SmoothFunction(
        value=lambda x: np.zeros(np.asarray(x).shape[:-1]),
        grad=lambda x: np.zeros(np.asarray(x).shape),
        hess=lambda x: np.zeros(np.asarray(x).shape + (np.asarray(x).shape[-1],)),
    )


def build_certificate(cfg: ExperimentConfig) -> LyapunovCertificate:
    spec = cfg.certificate or CertificateSpec()
    V = cosh_function(spec.scale) if spec.kind == "cosh" else _zero_function()
    return LyapunovCertificate(V, spec.C0, spec.C1, spec.K)


def feedback_policy(name: str):
    if name == "lipschitz":
        return lipschitz_policy
    raise ConfigError(f"unknown feedback policy {name!r}")


def dt_for(h: float, ratio: int) -> float:
    dt = h / ratio
    if not math.isfinite(dt) or dt <= 0:
        raise ConfigError("dt must be positive")
    return dt
