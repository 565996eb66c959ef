"""Experiment configuration read from YAML.

Every section is optional. Missing keys take the dataclass defaults
(success bonus 10, unit weights, 50 BO simulations, stall threshold
0.002, ...). Unknown keys and wrong types raise ConfigError naming the key.

    benchmark: two_stage
    seed: 0
    out_dir: runs/two_stage
    bo_repeats: 1
    goals: 200
    budget: 2000
    bo:       {max_sims: 50, stall_tol: 0.002}
    train:    {total_env_evals: 20000, workers: 6}
    reward:   {success_bonus: 10.0, max_steps: 50}
    parasitic: {beta: {gain: 0.02, bandwidth: 0.10, phase_margin: 0.05}, beta_power: 0.10}
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .bo import BoConfig
from .circuits import BENCHMARKS
from .errors import ConfigError, SizingError
from .ppo import TrainConfig
from .reward import RewardConfig
from .simulator import ParasiticModel


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: str = "two_stage"
    seed: int = 0
    out_dir: str = "runs"
    bo_repeats: int = 1
    goals: int = 200
    budget: int = 2000
    pareto_method: str = "rl"
    max_rounds: int = 3
    bo: BoConfig = field(default_factory=BoConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    parasitic: ParasiticModel = field(default_factory=ParasiticModel)

    def __post_init__(self):
        if self.benchmark not in BENCHMARKS:
            raise ConfigError(f"benchmark: unknown circuit {self.benchmark!r}")
        for k in ("bo_repeats", "goals", "budget", "max_rounds"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k}: must be >= 1")
        if self.pareto_method not in ("rl", "bo", "random"):
            raise ConfigError(f"pareto_method: expected rl, bo or random, got {self.pareto_method!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["reward"]["weights"] is not None:
            d["reward"]["weights"] = list(d["reward"]["weights"])
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def _check_type(key: str, value, tp):
    origin = typing.get_origin(tp)
    if tp is typing.Any:
        return value
    if origin is typing.Union or type(tp).__name__ == "UnionType":
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        for a in args:
            if a is type(None):
                continue
            try:
                return _check_type(key, value, a)
            except ConfigError:
                pass
        raise ConfigError(f"{key}: expected {tp}, got {type(value).__name__}")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list")
        return tuple(_check_type(f"{key}[{i}]", v, typing.get_args(tp)[0]) for i, v in enumerate(value))
    if origin is dict or tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a mapping")
        return {str(k): _check_type(f"{key}.{k}", v, float) for k, v in value.items()}
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported type {tp}")


def _build(cls, data, prefix: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kw = {}
    for k, v in data.items():
        key = f"{prefix}{k}"
        if k not in names:
            raise ConfigError(f"{key}: unknown key")
        tp = hints[k]
        if dataclasses.is_dataclass(tp):
            kw[k] = _build(tp, v, key + ".")
        else:
            kw[k] = _check_type(key, v, tp)
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except SizingError as e:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {e}") from e


def config_from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def parse_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"{p}: not valid YAML ({e})") from e
    return config_from_dict(data)
