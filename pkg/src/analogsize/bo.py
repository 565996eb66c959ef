"""Bayesian-optimization vanguard that picks the RL agent's starting point.

The objective is the corner-averaged reward at the midpoint design goal. A
GP is refitted after every simulation, Monte-Carlo expected improvement is
maximized over on-grid candidates, and the loop stops when the best reward
has improved by less than ``stall_tol`` over the last ``stall_window``
iterations or the simulation budget is spent.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm, qmc

from .circuits import Benchmark, CircuitGraph, clamp_to_grid
from .errors import EvaluationError, InvariantError, VanguardError
from .gp import GpModel, gp_fit, gp_posterior
from .reward import RewardConfig, midpoint_goal, step_reward
from .simulator import evaluate_all_corners


@dataclass(frozen=True)
class BoConfig:
    max_sims: int = 50
    init_points: int | None = None  # None -> 2 * dim
    mc_samples: int = 128
    candidates: int = 512
    restarts: int = 4
    stall_window: int = 10
    stall_tol: float = 0.002
    joint_ei: bool = False
    max_gp_points: int = 300

    def __post_init__(self):
        if self.max_sims < 1 or self.mc_samples < 1 or self.candidates < 1:
            raise InvariantError("BO budgets must be positive")
        if self.restarts < 0 or self.stall_window < 1:
            raise InvariantError("bad restart count or stall window")


@dataclass
class BoState:
    history: list = field(default_factory=list)  # (params, reward)
    trace: list = field(default_factory=list)    # dict rows for the results log
    failures: int = 0

    @property
    def best_index(self) -> int:
        return int(np.argmax([r for _, r in self.history]))

    @property
    def best(self):
        x, r = self.history[self.best_index]
        return x, r

    @property
    def best_curve(self) -> np.ndarray:
        return np.maximum.accumulate([r for _, r in self.history])


def normal_draws(n: int, q: int, rng: np.random.Generator) -> np.ndarray:
    """(n, q) standard normal draws from a scrambled Sobol sequence.

    Quasi-random draws cut the Monte-Carlo error of EI from O(n^-1/2) to
    nearly O(n^-1) at the same sample count.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        u = qmc.Sobol(q, scramble=True, seed=rng).random(n)
    return norm.ppf(np.clip(u, 1e-12, 1 - 1e-12))


def mc_expected_improvement(model: GpModel, points, best: float, n_samples: int,
                            rng: np.random.Generator, joint: bool = False) -> np.ndarray:
    """Monte-Carlo EI: mean over posterior draws of max(f - best, 0).

    Per-point mode returns one value per row of ``points`` using marginal
    draws. Joint mode samples the q points together and returns the single
    batch value E[max_j max(f_j - best, 0)] as a length-1 array.
    """
    if joint:
        mean, cov = gp_posterior(model, points, full_cov=True)
        q = len(mean)
        L = _psd_cholesky(cov)
        f = mean[None, :] + normal_draws(n_samples, q, rng) @ L.T
        return np.array([np.mean(np.max(np.maximum(f - best, 0.0), axis=1))])
    mean, var = gp_posterior(model, points)
    z = normal_draws(n_samples, 1, rng)
    f = mean[None, :] + np.sqrt(var)[None, :] * z
    return np.mean(np.maximum(f - best, 0.0), axis=0)


def _psd_cholesky(cov: np.ndarray) -> np.ndarray:
    jitter = 1e-10 * max(1.0, float(np.max(np.diag(cov))))
    for _ in range(8):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(len(cov)))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    w, V = np.linalg.eigh(cov)
    return V * np.sqrt(np.maximum(w, 0.0))


def to_unit(graph: CircuitGraph, X) -> np.ndarray:
    lo, hi = graph.lower(), graph.upper()
    return (np.asarray(X, dtype=float) - lo) / (hi - lo)


def from_unit(graph: CircuitGraph, U) -> np.ndarray:
    lo, hi = graph.lower(), graph.upper()
    return clamp_to_grid(lo + np.asarray(U, dtype=float) * (hi - lo), graph.slots)


def candidate_set(graph: CircuitGraph, incumbent, n_random: int, rng) -> np.ndarray:
    """Random on-grid points, all single-coordinate +-1 step moves of the
    incumbent, and random multi-coordinate +-1 step moves of it."""
    d = graph.n_params
    step, lo, hi = graph.step(), graph.lower(), graph.upper()
    rand = from_unit(graph, rng.random((n_random, d)))
    moves = np.concatenate([np.eye(d), -np.eye(d), rng.integers(-1, 2, (n_random // 2, d))])
    local = np.clip(incumbent[None, :] + moves * step, lo, hi)
    return np.unique(np.concatenate([clamp_to_grid(local, graph.slots), rand]), axis=0)


def propose_next(model: GpModel, state: BoState, graph: CircuitGraph, cfg: BoConfig,
                 rng: np.random.Generator, extra_candidates=None) -> np.ndarray:
    """On-grid parameter vector with the highest MC-EI; ties go to the lowest index."""
    x_best, r_best = state.best
    cands = candidate_set(graph, x_best, cfg.candidates, rng)
    if extra_candidates is not None:
        cands = np.concatenate([np.atleast_2d(extra_candidates), cands])
    ei = mc_expected_improvement(model, to_unit(graph, cands), r_best, cfg.mc_samples, rng)
    return cands[int(np.argmax(ei))]


def initial_design(graph: CircuitGraph, n: int, rng: np.random.Generator) -> np.ndarray:
    sob = qmc.Sobol(graph.n_params, scramble=True, seed=rng)
    with warnings.catch_warnings():
        # 2*d is rarely a power of two; balance is not needed for a seed design
        warnings.simplefilter("ignore", UserWarning)
        u = sob.random(n)
    return from_unit(graph, u)


def _gp_data(state: BoState, graph, cfg: BoConfig):
    X = np.array([x for x, _ in state.history])
    y = np.array([r for _, r in state.history])
    if len(X) > cfg.max_gp_points:
        keep = set(range(len(X) - cfg.max_gp_points + 1, len(X))) | {state.best_index}
        idx = sorted(keep)
        X, y = X[idx], y[idx]
    return to_unit(graph, X), y


def optimize(objective: Callable[[np.ndarray], float], graph: CircuitGraph, cfg: BoConfig,
             rng: np.random.Generator, stall: bool = True,
             callback: Callable[[BoState], None] | None = None) -> BoState:
    """Maximize ``objective`` over the design grid with GP-EI."""
    n_init = cfg.init_points if cfg.init_points is not None else 2 * graph.n_params
    if cfg.max_sims < n_init:
        raise InvariantError(f"max_sims {cfg.max_sims} is below the initial design size {n_init}")
    state = BoState()

    def run(x, phase):
        t0 = time.perf_counter()
        try:
            r = float(objective(x))
        except EvaluationError:
            state.failures += 1
            return
        state.history.append((np.asarray(x, dtype=float).copy(), r))
        state.trace.append(dict(sim=len(state.history), phase=phase, reward=r,
                                best=float(state.best[1]),
                                wall_ms=1e3 * (time.perf_counter() - t0)))
        if callback is not None:
            callback(state)

    for x in initial_design(graph, n_init, rng):
        run(x, "init")
    if not state.history:
        raise VanguardError("every initial-design evaluation failed")

    iteration = 0
    best_at = [state.best[1]]  # best reward after each BO iteration, index 0 = after init
    while len(state.history) + state.failures < cfg.max_sims:
        X, y = _gp_data(state, graph, cfg)
        model = gp_fit(X, y, restarts=cfg.restarts, rng=rng)
        run(propose_next(model, state, graph, cfg, rng), "bo")
        iteration += 1
        best_at.append(state.best[1])
        if stall and iteration >= cfg.stall_window:
            if best_at[-1] - best_at[-1 - cfg.stall_window] < cfg.stall_tol:
                break
    return state


def vanguard_objective(bench: Benchmark, reward_cfg: RewardConfig = RewardConfig()):
    goal = midpoint_goal(bench.goal_space)
    corners = bench.corners

    def f(x):
        return step_reward(evaluate_all_corners(bench, x, corners), goal, reward_cfg)

    return f


def run_vanguard(bench: Benchmark, cfg: BoConfig = BoConfig(), rng: np.random.Generator | None = None,
                 objective: Callable | None = None) -> tuple[np.ndarray, BoState]:
    """Best parameters found by BO on the midpoint-goal reward, and the run state."""
    rng = rng if rng is not None else np.random.default_rng(0)
    state = optimize(objective or vanguard_objective(bench), bench.graph, cfg, rng, stall=True)
    return state.best[0].copy(), state


def run_vanguard_repeats(bench: Benchmark, repeats: int, cfg: BoConfig = BoConfig(),
                         rng: np.random.Generator | None = None):
    """Repeat the vanguard and keep the run whose best reward is closest to the
    mean best reward over all repeats (a typical rather than lucky start)."""
    if repeats < 1:
        raise InvariantError("repeats must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    runs = [run_vanguard(bench, cfg, np.random.default_rng(s))
            for s in rng.integers(0, 2**63 - 1, repeats)]
    bests = np.array([st.best[1] for _, st in runs])
    pick = int(np.argmin(np.abs(bests - bests.mean())))
    return runs[pick][0], runs[pick][1], bests
