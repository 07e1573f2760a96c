"""Experiment configuration: one flat record per run, loaded from YAML/JSON plus flag overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .policies import Policy

EXPERIMENTS = ("verify-bias", "verify-entropy", "run-toy", "sweep-sparsity")
FORMATS = ("csv", "json")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int = 0
    trials: int | None = None
    out: str = "results.csv"
    format: str = "csv"
    # synthetic heads / prompt
    n: int | None = None
    d: int = 64
    # budget split
    total_budget: int = 256
    recent_budget: int = 32
    pool_kernel: int = 7
    lambda_floor: float | None = None
    # verify-entropy
    lengths: list[int] = field(default_factory=lambda: [64, 256, 1024])
    lambdas: list[float] = field(default_factory=lambda: [0.0, 1.0])
    calibration_budget: int = 64
    lognormal_trials: int = 1_000_000
    lognormal_params: list[list[float]] = field(default_factory=lambda: [[0.0, 0.0], [0.0, 1.0], [1.0, 4.0]])
    # run-toy
    vocab: int = 64
    layers: int = 2
    heads: int = 2
    head_dim: int = 16
    mlp_mult: int = 4
    steps: int = 8
    policies: list[str] = field(default_factory=lambda: [p.value for p in Policy])
    budgets: list[int] = field(default_factory=lambda: [256])
    # sweep-sparsity
    num_thresholds: int = 111
    threshold_max: float = 1.1

    def resolved(self) -> dict:
        return dataclasses.asdict(self)


_PER_KIND_DEFAULTS = {
    "verify-bias": {"trials": 200, "n": 512},
    "verify-entropy": {"trials": 200, "n": 0},
    "run-toy": {"trials": 1, "n": 2048},
    "sweep-sparsity": {"trials": 50, "n": 2048},
}

_FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig)}


def load_file(path: str | Path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def build_config(experiment: str, file_values: dict, overrides: dict) -> ExperimentConfig:
    """Merge file values and flag overrides (flags win), fill defaults, validate."""
    values = dict(file_values)
    unknown = sorted(set(values) - _FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if values.get("experiment", experiment) != experiment:
        raise ConfigError(f"config is for {values['experiment']!r}, not {experiment!r}")
    values["experiment"] = experiment
    values.update({k: v for k, v in overrides.items() if v is not None})
    for key, default in _PER_KIND_DEFAULTS[experiment].items():
        if values.get(key) is None:
            values[key] = default
    try:
        cfg = ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    validate(cfg)
    return cfg


def _positive_int(cfg, name, minimum=1):
    value = getattr(cfg, name)
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")


def validate(cfg: ExperimentConfig) -> None:
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {cfg.experiment!r}")
    if cfg.format not in FORMATS:
        raise ConfigError(f"format must be one of {FORMATS}, got {cfg.format!r}")
    _positive_int(cfg, "seed", 0)
    if cfg.seed >= 1 << 64:
        raise ConfigError("seed must fit in 64 bits")
    for name in ("trials", "d", "recent_budget", "pool_kernel", "vocab", "layers", "heads",
                 "head_dim", "mlp_mult", "calibration_budget", "num_thresholds"):
        _positive_int(cfg, name)
    _positive_int(cfg, "steps", 0)
    _positive_int(cfg, "lognormal_trials", 2)
    if cfg.experiment == "verify-bias":
        _positive_int(cfg, "trials", 2)
        _positive_int(cfg, "n", 2)
        if cfg.recent_budget > cfg.n:
            raise ConfigError("recent_budget must not exceed n")
    elif cfg.experiment != "verify-entropy":
        _positive_int(cfg, "n", 1)
    if cfg.pool_kernel % 2 == 0:
        raise ConfigError("pool_kernel must be odd")
    if cfg.total_budget < cfg.recent_budget:
        raise ConfigError("total_budget must be >= recent_budget")
    if cfg.lambda_floor is not None and not cfg.lambda_floor >= 0:
        raise ConfigError("lambda_floor must be >= 0")
    if not cfg.lengths or any(not isinstance(i, int) or i < 2 for i in cfg.lengths):
        raise ConfigError("lengths must be integers >= 2")
    if not cfg.lambdas or any(not isinstance(x, (int, float)) or x < 0 for x in cfg.lambdas):
        raise ConfigError("lambdas must be nonnegative numbers")
    for pair in cfg.lognormal_params:
        if not isinstance(pair, (list, tuple)) or len(pair) != 2 or pair[1] < 0:
            raise ConfigError("lognormal_params entries must be [mu, sigma2] with sigma2 >= 0")
    for name in cfg.policies:
        if name not in {p.value for p in Policy}:
            raise ConfigError(f"unknown policy {name!r}")
    if not cfg.budgets or any(not isinstance(b, int) or b < cfg.recent_budget for b in cfg.budgets):
        raise ConfigError("budgets must be integers >= recent_budget")
    if not cfg.threshold_max > 0:
        raise ConfigError("threshold_max must be > 0")


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
