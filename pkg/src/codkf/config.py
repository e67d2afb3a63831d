"""Experiment configuration: defaults, validation and JSON round-trip."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .filters import EXTENSION_FAMILIES, FAMILIES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: int | str = 1  # 1, 2 or "custom"
    nodes: int = 20
    edge_density: float = 0.15
    high_quality_prob: float = 0.5  # used by experiment 1 and "custom"
    steps: int = 600
    runs: int = 100
    seed: int = 0
    filters: tuple[str, ...] = FAMILIES
    tol_rank: float = 1e-6
    tol_rho: float = 1e-3
    eps_feas: float = 1e-6
    w_p: float = 0.5
    T: float = 0.1
    q: float = 2e-6
    a_variant: str = "standard"  # or "paper"
    p0_scale: float = 10.0
    x0_mode: str = "perturbed"  # or "truth"
    x_true0: tuple[float, ...] = (0.0, 0.0, 1.0, 0.0)
    divergence_ceiling: float = 1e6
    backend: str = "barrier"
    workers: int = 1
    out_dir: str = "results"

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(self.filters))
        object.__setattr__(self, "x_true0", tuple(float(v) for v in self.x_true0))
        validate(self)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["filters"] = list(self.filters)
        d["x_true0"] = list(self.x_true0)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes) -> ExperimentConfig:
        return ExperimentConfig.from_dict({**self.to_dict(), **changes})


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_real(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate(c: ExperimentConfig) -> None:
    _check(c.experiment in (1, 2, "custom"), f"experiment must be 1, 2 or 'custom', got {c.experiment!r}")
    for name in ("nodes", "steps", "runs", "seed", "workers"):
        _check(_is_int(getattr(c, name)), f"{name} must be an integer")
    for name in ("edge_density", "high_quality_prob", "tol_rank", "tol_rho", "eps_feas", "w_p", "T", "q",
                 "p0_scale", "divergence_ceiling"):
        _check(_is_real(getattr(c, name)), f"{name} must be a number")
    _check(c.nodes >= 1, f"nodes must be >= 1, got {c.nodes}")
    _check(0 < c.edge_density <= 1, f"edge_density must lie in (0, 1], got {c.edge_density}")
    _check(0 <= c.high_quality_prob <= 1, f"high_quality_prob must lie in [0, 1], got {c.high_quality_prob}")
    _check(c.steps >= 0, f"steps must be >= 0, got {c.steps}")
    _check(c.runs >= 1, f"runs must be >= 1, got {c.runs}")
    _check(0 <= c.seed < 2**64, f"seed must be an unsigned 64-bit integer, got {c.seed}")
    _check(c.workers >= 1, f"workers must be >= 1, got {c.workers}")
    _check(len(c.filters) > 0, "at least one filter family is required")
    for f in c.filters:
        _check(f in FAMILIES or f in EXTENSION_FAMILIES, f"unknown filter family {f!r}; expected {FAMILIES}")
        _check(f not in EXTENSION_FAMILIES, f"filter family {f!r} is not implemented")
    _check(len(set(c.filters)) == len(c.filters), "duplicate filter family")
    _check(0 < c.tol_rank < 1, f"tol_rank must lie in (0, 1), got {c.tol_rank}")
    _check(0 < c.tol_rho < 1, f"tol_rho must lie in (0, 1), got {c.tol_rho}")
    _check(0 < c.eps_feas < 1, f"eps_feas must lie in (0, 1), got {c.eps_feas}")
    _check(c.T > 0, f"T must be positive, got {c.T}")
    _check(c.q >= 0, f"q must be nonnegative, got {c.q}")
    _check(c.a_variant in ("standard", "paper"), f"a_variant must be 'standard' or 'paper', got {c.a_variant!r}")
    _check(c.p0_scale > 0, f"p0_scale must be positive, got {c.p0_scale}")
    _check(c.x0_mode in ("perturbed", "truth"), f"x0_mode must be 'perturbed' or 'truth', got {c.x0_mode!r}")
    _check(len(c.x_true0) == 4, "x_true0 must have 4 entries")
    _check(c.divergence_ceiling > 0, "divergence_ceiling must be positive")
    _check(c.backend in ("barrier", "cvxpy"), f"backend must be 'barrier' or 'cvxpy', got {c.backend!r}")


def load_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    """Defaults, then the JSON file, then non-None ``overrides`` (flags win)."""
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(data)


__all__ = ["ConfigError", "ExperimentConfig", "load_config", "validate"]
