"""Experiment configuration: one YAML document per run, flag overrides on
top, defaults underneath. Every default is either the synthetic-experiment
default setting or a documented design decision.
"""

from __future__ import annotations

import copy
import math
import os
from dataclasses import dataclass, field
from typing import Any

import yaml

from .solver import SolverParams, epoch_boundaries, EpochSchedule

ALGORITHMS = ("safe_altgdmin", "ts_conservative", "trace_norm", "mom")


class ConfigError(ValueError):
    """Invalid or infeasible experiment configuration."""


@dataclass
class ScheduleConfig:
    mode: str = "fixed"
    epochs: int = 4
    epoch_rounds: int = 50
    horizon: int | None = None

    def build(self) -> EpochSchedule:
        if self.mode == "fixed":
            return epoch_boundaries(mode="fixed", epochs=self.epochs,
                                    per_epoch=self.epoch_rounds)
        return epoch_boundaries(n=self.horizon, mode="doubling")


@dataclass
class TsConfig:
    reg: float = 1.0
    norm_bound: float | None = None


@dataclass
class TraceNormConfig:
    lambda_scale: float = 1.0
    iters: int = 200


@dataclass
class MovielensConfig:
    path: str | None = None
    nmf_iters: int = 300
    pipeline_seed: int = 0


@dataclass
class SweepConfig:
    param: str | None = None
    values: list = field(default_factory=list)


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    algorithms: tuple[str, ...] = ("safe_altgdmin",)
    d: int = 100
    r: int = 2
    T: int = 100
    K: int = 10
    baseline_rank: int = 5
    alpha: float = 0.2
    sigma_eta: float = 1e-3
    delta: float = 0.01
    trials: int = 100
    base_seed: int = 0
    col_norm_bounds: tuple[float, float] = (1.0, 2.0)
    baseline_reward_floor: float | None = 0.0
    gap_window: tuple[float, float] | None = None
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    solver: SolverParams = field(default_factory=SolverParams)
    ts: TsConfig = field(default_factory=TsConfig)
    trace_norm: TraceNormConfig = field(default_factory=TraceNormConfig)
    movielens: MovielensConfig = field(default_factory=MovielensConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def build_schedule(self) -> EpochSchedule:
        return self.schedule.build()


_SECTION_TYPES = {
    "schedule": ScheduleConfig,
    "solver": SolverParams,
    "ts": TsConfig,
    "trace_norm": TraceNormConfig,
    "movielens": MovielensConfig,
    "sweep": SweepConfig,
}
_TUPLE_KEYS = {"col_norm_bounds", "gap_window"}


def _apply_section(obj, data: dict, section: str) -> None:
    for key, value in data.items():
        if not hasattr(obj, key):
            raise ConfigError(f"unknown key {section}.{key}")
        setattr(obj, key, value)


def _apply(cfg: ExperimentConfig, data: dict) -> None:
    for key, value in data.items():
        if key == "algorithm":
            cfg.algorithms = _parse_algorithms(value)
        elif key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            _apply_section(getattr(cfg, key), value, key)
        elif key in _TUPLE_KEYS:
            setattr(cfg, key, None if value is None else tuple(value))
        elif hasattr(cfg, key) and key != "algorithms":
            setattr(cfg, key, value)
        else:
            raise ConfigError(f"unknown key {key!r}")


def _parse_algorithms(value) -> tuple[str, ...]:
    if value == "all":
        return ALGORITHMS
    if isinstance(value, str):
        names = tuple(v.strip() for v in value.split(",") if v.strip())
    else:
        names = tuple(value)
    for name in names:
        if name not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {name!r}; choices: {ALGORITHMS}")
    if not names:
        raise ConfigError("no algorithm selected")
    return names


def set_by_path(data: dict, path: str, value) -> None:
    """Set a (possibly dotted) key in a raw config mapping."""
    keys = path.split(".")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot descend into {key!r} in {path!r}")
    node[keys[-1]] = value


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.dataset not in ("synthetic", "movielens"):
        raise ConfigError(f"unknown dataset {cfg.dataset!r}")
    for name in cfg.algorithms:
        if name not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {name!r}")
    if cfg.d < 1 or cfg.T < 1 or cfg.K < 1:
        raise ConfigError("d, T, K must be positive")
    if not (1 <= cfg.r <= min(cfg.d, cfg.T)):
        raise ConfigError(f"r={cfg.r} must lie in [1, min(d, T)={min(cfg.d, cfg.T)}]")
    if not (1 <= cfg.baseline_rank <= cfg.K):
        raise ConfigError(f"baseline_rank={cfg.baseline_rank} outside [1, K={cfg.K}]")
    if not (0.0 <= cfg.alpha < 1.0):
        raise ConfigError(f"alpha={cfg.alpha} outside [0, 1)")
    if cfg.sigma_eta < 0:
        raise ConfigError("sigma_eta must be nonnegative")
    if not (0.0 < cfg.delta < 1.0):
        raise ConfigError(f"delta={cfg.delta} outside (0, 1)")
    if cfg.trials < 1:
        raise ConfigError("trials must be at least 1")
    if cfg.base_seed < 0:
        raise ConfigError("base_seed must be nonnegative")
    l, u = cfg.col_norm_bounds
    if not (0 < l <= u):
        raise ConfigError(f"col_norm_bounds needs 0 < l <= u, got ({l}, {u})")
    if cfg.gap_window is not None:
        lo, hi = cfg.gap_window
        if not (0 <= lo <= hi):
            raise ConfigError(f"gap_window needs 0 <= lo <= hi, got ({lo}, {hi})")
    cfg.solver.validate()

    try:
        schedule = cfg.build_schedule()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    shortest = schedule.min_epoch_length()
    if "safe_altgdmin" in cfg.algorithms:
        needed = (2 * cfg.solver.gd_iters + 1) * cfg.r if cfg.solver.sample_split else cfg.r
        if shortest < needed:
            raise ConfigError(
                f"shortest epoch ({shortest} rounds per task) cannot feed "
                f"{'split ' if cfg.solver.sample_split else ''}estimation with "
                f"gd_iters={cfg.solver.gd_iters}, r={cfg.r}: needs {needed}"
            )
    if "mom" in cfg.algorithms and schedule.epochs < 2:
        raise ConfigError("method of moments needs a schedule with at least 2 epochs")

    if cfg.dataset == "movielens":
        k = math.isqrt(cfg.d)
        if k * k != cfg.d:
            raise ConfigError(f"movielens features need square d, got d={cfg.d}")
        if cfg.T > 1682:
            raise ConfigError("cannot request more tasks than items")

    if cfg.sweep.param is not None:
        if len(set(map(str, cfg.sweep.values))) != len(cfg.sweep.values) or not cfg.sweep.values:
            raise ConfigError("sweep values must be nonempty and distinct")
    return cfg


def load_config(source: str | dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Build a validated config from a YAML file path / text, a mapping, or
    nothing (pure defaults); `overrides` is a raw mapping applied on top."""
    if source is None:
        data: dict = {}
    elif isinstance(source, dict):
        data = copy.deepcopy(source)
    else:
        text = str(source)
        if os.path.exists(text):
            with open(text, "r", encoding="utf-8") as fh:
                text = fh.read()
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError("config document must be a mapping")
        data = loaded
    if overrides:
        merged: dict = copy.deepcopy(data)
        for path, value in overrides.items():
            set_by_path(merged, path, value)
        data = merged
    cfg = ExperimentConfig()
    _apply(cfg, data)
    return validate(cfg)


def expand_sweep(cfg: ExperimentConfig) -> list[ExperimentConfig]:
    """One config per sweep value, all sharing base_seed; a no-op list when
    no sweep is configured."""
    if cfg.sweep.param is None:
        return [cfg]
    out = []
    for value in cfg.sweep.values:
        child = copy.deepcopy(cfg)
        child.sweep = SweepConfig()
        node: Any = child
        keys = cfg.sweep.param.split(".")
        for key in keys[:-1]:
            if not hasattr(node, key):
                raise ConfigError(f"unknown sweep parameter {cfg.sweep.param!r}")
            node = getattr(node, key)
        if not hasattr(node, keys[-1]):
            raise ConfigError(f"unknown sweep parameter {cfg.sweep.param!r}")
        setattr(node, keys[-1], value)
        out.append(validate(child))
    return out
