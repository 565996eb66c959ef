"""Design goals, the corner-averaged reward, success test and Op-Amp FoM."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .circuits import AT_LEAST, AT_MOST, GoalRange
from .errors import EvaluationError, InvariantError
from .simulator import SpecMatrix, SpecVector


@dataclass(frozen=True)
class DesignGoal:
    specs: tuple[str, ...]
    values: np.ndarray
    directions: tuple[str, ...]

    def __post_init__(self):
        if not (len(self.specs) == len(self.values) == len(self.directions)):
            raise InvariantError("goal fields have mismatched lengths")
        for d in self.directions:
            if d not in (AT_LEAST, AT_MOST):
                raise InvariantError(f"bad direction {d!r}")

    @classmethod
    def from_space(cls, space: Sequence[GoalRange], values) -> "DesignGoal":
        return cls(tuple(g.spec for g in space), np.asarray(values, dtype=float),
                   tuple(g.direction for g in space))

    def as_dict(self) -> dict[str, float]:
        return {s: float(v) for s, v in zip(self.specs, self.values)}

    @property
    def signs(self) -> np.ndarray:
        return np.array([1.0 if d == AT_LEAST else -1.0 for d in self.directions])


@dataclass(frozen=True)
class RewardConfig:
    weights: tuple[float, ...] | None = None  # None -> all ones
    success_bonus: float = 10.0
    max_steps: int = 50

    def __post_init__(self):
        if self.max_steps < 1:
            raise InvariantError("max_steps must be >= 1")

    def weight_array(self, n: int) -> np.ndarray:
        if self.weights is None:
            return np.ones(n)
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (n,):
            raise InvariantError(f"expected {n} reward weights, got {w.shape}")
        return w


def sample_goal(space: Sequence[GoalRange], rng: np.random.Generator) -> DesignGoal:
    """Draw one goal: uniform per range, log-uniform for decade-wide ranges."""
    vals = []
    for g in space:
        u = rng.random()
        if g.log:
            vals.append(float(np.exp(np.log(g.low) + u * (np.log(g.high) - np.log(g.low)))))
        else:
            vals.append(g.low + u * (g.high - g.low))
    return DesignGoal.from_space(space, vals)


def sample_goals(space, rng, n: int) -> list[DesignGoal]:
    return [sample_goal(space, rng) for _ in range(n)]


def midpoint_goal(space: Sequence[GoalRange]) -> DesignGoal:
    """Per-spec (max + min) / 2; bound-type ranges use [bound, bound + span]."""
    return DesignGoal.from_space(space, [(g.high + g.low) / 2.0 for g in space])


def normalized_margin(s, g, direction) -> np.ndarray:
    """Clipped normalized distance to the goal, in (-1, 0] for positive specs.

    ``direction`` may be a string or an array of +1 (at least) / -1 (at most).
    """
    s = np.asarray(s, dtype=float)
    g = np.asarray(g, dtype=float)
    if isinstance(direction, str):
        sign = 1.0 if direction == AT_LEAST else -1.0
    else:
        sign = np.asarray(direction, dtype=float)
    denom = s + g
    if np.any(denom <= 0):
        raise EvaluationError("spec + goal must be positive for the normalized margin")
    return np.minimum(sign * (s - g) / denom, 0.0)


def _spec_array(spec, goal: DesignGoal) -> np.ndarray:
    if isinstance(spec, SpecMatrix):
        return spec.select(goal.specs)
    arr = np.asarray(spec, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[0] != len(goal.specs):
        raise InvariantError(f"spec matrix has {arr.shape[0]} rows, goal has {len(goal.specs)}")
    return arr


def margins(spec, goal: DesignGoal) -> np.ndarray:
    """Per-spec, per-corner margins, shape (N, n_corners)."""
    s = _spec_array(spec, goal)
    return normalized_margin(s, goal.values[:, None], goal.signs[:, None])


def corner_rewards(spec, goal: DesignGoal, cfg: RewardConfig = RewardConfig()) -> np.ndarray:
    m = margins(spec, goal)
    return cfg.weight_array(m.shape[0]) @ m


def step_reward(spec, goal: DesignGoal, cfg: RewardConfig = RewardConfig()) -> float:
    """Success bonus when every corner meets every goal, else the mean corner sub-reward."""
    r = corner_rewards(spec, goal, cfg)
    if np.all(r == 0.0):
        return float(cfg.success_bonus)
    return float(np.mean(r))


def is_success(spec, goal: DesignGoal) -> bool:
    return bool(np.all(margins(spec, goal) == 0.0))


def episode_return(rewards: Sequence[float]) -> float:
    return float(sum(rewards))


def fom_opamp(spec: SpecVector | SpecMatrix, c_load: float):
    """(GBW [MHz] * C_L [pF]) / P [uW]. Per corner for a SpecMatrix."""
    if isinstance(spec, SpecMatrix):
        gbw, power = spec.row("gbw"), spec.row("power")
    else:
        gbw, power = spec.gbw, spec.power
    if np.any(np.asarray(power) <= 0):
        raise EvaluationError("power must be positive")
    return (np.asarray(gbw) / 1e6) * c_load / (np.asarray(power) / 1e-6)
