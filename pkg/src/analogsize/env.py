"""Sizing environment: parameters in, observation + reward out.

One ``SizingEnv`` serves a batch of independent episodes that share a
benchmark and a starting point. Each call to ``evaluate`` counts one
simulation per parameter vector (all corners at once).
"""

from __future__ import annotations

import numpy as np

from .circuits import Benchmark, feature_matrix
from .policy import ObsNormalizer
from .reward import DesignGoal, RewardConfig, is_success, midpoint_goal, sample_goal, step_reward
from .simulator import QUANTITIES, evaluate_batch


class SizingEnv:
    def __init__(self, bench: Benchmark, start, reward_cfg: RewardConfig = RewardConfig(),
                 discount: np.ndarray | None = None):
        self.bench = bench
        self.graph = bench.graph
        self.corners = bench.corners
        self.start = np.asarray(start, dtype=float).copy()
        self.reward_cfg = reward_cfg
        self.spec_names = tuple(g.spec for g in bench.goal_space)
        self.rows = [QUANTITIES.index(s) for s in self.spec_names]
        self.mask = self.graph.adjacency(self_loops=True)
        self.norm = ObsNormalizer.from_goal_space(bench.goal_space)
        self.discount = None if discount is None else np.asarray(discount, dtype=float)
        self.n_evals = 0

    @property
    def max_steps(self) -> int:
        return self.reward_cfg.max_steps

    def simulate(self, X) -> np.ndarray:
        """All quantities at all corners, shape (B, len(QUANTITIES), C)."""
        X = np.atleast_2d(X)
        self.n_evals += len(X)
        return evaluate_batch(self.bench, X, self.corners)

    def goal_specs(self, full: np.ndarray) -> np.ndarray:
        """Goal-order specs as the agent sees and is scored on them, (B, N, C)."""
        s = full[:, self.rows, :]
        return s if self.discount is None else s * self.discount

    def observe(self, X, goals: list[DesignGoal], specs: np.ndarray):
        X = np.atleast_2d(X)
        feats = feature_matrix(self.graph, X)
        gv = np.stack([g.values for g in goals])
        return feats, self.norm.observation(gv, specs)

    def reward(self, specs_one: np.ndarray, goal: DesignGoal) -> tuple[float, bool]:
        r = step_reward(specs_one, goal, self.reward_cfg)
        return r, is_success(specs_one, goal)


def worst_case_fom(full: np.ndarray, c_load: float) -> np.ndarray:
    """FoM from the lowest GBW and the highest power over corners; full is (..., Q, C)."""
    gbw = full[..., QUANTITIES.index("gbw"), :].min(-1)
    power = full[..., QUANTITIES.index("power"), :].max(-1)
    return (gbw / 1e6) * c_load / (power / 1e-6)


class GoalTask:
    """Reach a sampled design goal; success ends the episode."""

    terminates = True

    def __init__(self, bench: Benchmark):
        self.space = bench.goal_space

    def sample(self, rng) -> DesignGoal:
        return sample_goal(self.space, rng)

    def score(self, env: SizingEnv, full_one: np.ndarray, goal: DesignGoal) -> tuple[float, bool]:
        return env.reward(env.goal_specs(full_one[None])[0], goal)


class FomTask:
    """Maximize the worst-case Op-Amp FoM; there is no goal and no success.

    Rewards are divided by ``scale`` (the start point's FoM by default) to
    keep value targets of order one. The observation's goal slot holds the
    fixed midpoint goal.
    """

    terminates = False

    def __init__(self, bench: Benchmark, scale: float = 1.0):
        self.goal = midpoint_goal(bench.goal_space)
        self.c_load = bench.c_load
        self.scale = scale

    def sample(self, rng) -> DesignGoal:
        return self.goal

    def score(self, env: SizingEnv, full_one: np.ndarray, goal: DesignGoal) -> tuple[float, bool]:
        return float(worst_case_fom(full_one, self.c_load)) / self.scale, False
