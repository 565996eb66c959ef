"""Deployment of a trained policy, failure export, parasitic-aware sizing
and FoM (Pareto) optimization."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .bo import BoConfig, optimize
from .circuits import AT_LEAST, Benchmark, build_benchmark, random_params
from .env import FomTask, SizingEnv, worst_case_fom
from .errors import CheckpointError, InvariantError
from .policy import PolicyParams, load_checkpoint
from .ppo import TrainConfig, rollout_greedy, train
from .reward import DesignGoal, RewardConfig, is_success, margins
from .simulator import QUANTITIES, ParasiticModel, apply_parasitics, evaluate_all_corners


@dataclass
class DeploymentResult:
    goal: DesignGoal
    params: list           # ParamVector per step
    specs: list            # (N, C) goal-order specs per step, as scored
    rewards: list
    success: bool

    @property
    def steps(self) -> int:
        return len(self.rewards)

    @property
    def best_step(self) -> int:
        # np.argmax returns the first maximum, i.e. the earliest step on ties
        return int(np.argmax(self.rewards))


@dataclass(frozen=True)
class DeployMetrics:
    n_goals: int
    n_success: float   # fraction of goals met
    n_step: float      # mean simulations per goal, failures counted as T
    t_sim: float       # mean seconds per simulation
    fom_deploy: float

    @classmethod
    def from_results(cls, results: list[DeploymentResult], max_steps: int, t_sim: float) -> "DeployMetrics":
        if not results:
            raise InvariantError("no deployment results")
        succ = float(np.mean([r.success for r in results]))
        n_step = float(np.mean([r.steps if r.success else max_steps for r in results]))
        return cls(len(results), succ, n_step, t_sim, succ / (n_step * t_sim) if t_sim > 0 else float("inf"))


def _resolve(checkpoint, bench: Benchmark | None):
    if isinstance(checkpoint, PolicyParams):
        if bench is None:
            raise InvariantError("pass the benchmark together with in-memory weights")
        return checkpoint, bench, {}
    params, meta = load_checkpoint(checkpoint, expected_benchmark=bench.name if bench else None)
    return params, bench or build_benchmark(meta["benchmark"]), meta


def deploy(checkpoint, goals: list[DesignGoal], start=None, max_steps: int = 50,
           bench: Benchmark | None = None, discount=None,
           reward_cfg: RewardConfig | None = None) -> tuple[list[DeploymentResult], DeployMetrics]:
    """Greedy rollouts from ``start`` (default: the checkpoint's start) for each goal."""
    params, bench, meta = _resolve(checkpoint, bench)
    if params.arch.n_params != bench.graph.n_params:
        raise CheckpointError("checkpoint does not match the benchmark's parameter count")
    if start is None:
        if "start" not in meta:
            raise InvariantError("no starting point given and none stored in the checkpoint")
        start = meta["start"]
    cfg = reward_cfg or RewardConfig(max_steps=max_steps)
    env = SizingEnv(bench, start, cfg, discount=discount)
    t0 = time.perf_counter()
    trajs = rollout_greedy(env, params, goals)
    elapsed = time.perf_counter() - t0
    results = [DeploymentResult(t.goal, t.params, t.specs, t.rewards, t.success) for t in trajs]
    return results, DeployMetrics.from_results(results, cfg.max_steps, elapsed / max(env.n_evals, 1))


# --------------------------------------------------------------------------
# failure export

@dataclass
class FailureReport:
    best_step: int
    params: dict
    margins: np.ndarray       # (N, C)
    reward: float
    spec_names: tuple
    window: list              # [(step, params, reward)] around the best step

    def as_record(self) -> dict:
        return dict(best_step=self.best_step, params=self.params, reward=self.reward,
                    margins={s: [float(v) for v in row] for s, row in zip(self.spec_names, self.margins)})


def export_failure(result: DeploymentResult, param_names, span: int = 2) -> FailureReport:
    """Best step of a failed deployment (earliest maximum of the reward)."""
    if result.success:
        raise InvariantError("export_failure is for failed deployments only")
    k = result.best_step
    lo, hi = max(0, k - span), min(result.steps, k + span + 1)
    window = [(j, result.params[j], result.rewards[j]) for j in range(lo, hi)]
    return FailureReport(k, {n: float(v) for n, v in zip(param_names, result.params[k])},
                         margins(result.specs[k], result.goal), float(result.rewards[k]),
                         result.goal.specs, window)


def render_failure_table(report: FailureReport) -> str:
    """Aligned text table: one column per step in the window, one row per
    parameter, reward in the last row."""
    names = list(report.params)
    head = ["Parameter"] + [f"step {j + 1}" for j, _, _ in report.window]
    rows = [[n] + [f"{p[i]:g}" for _, p, _ in report.window] for i, n in enumerate(names)]
    rows.append(["Reward"] + [f"{r:.3f}" for _, _, r in report.window])
    table = [head] + rows
    widths = [max(len(r[c]) for r in table) for c in range(len(head))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# --------------------------------------------------------------------------
# parasitic-aware sizing

@dataclass
class ParasiticResult:
    params: np.ndarray
    rounds: int
    success: bool
    alphas: list = field(default_factory=list)   # discount matrix used in each round
    post_specs: np.ndarray | None = None
    last: DeploymentResult | None = None


def discount_update(alpha: np.ndarray, s_pre: np.ndarray, s_post: np.ndarray, goal: DesignGoal) -> np.ndarray:
    """alpha = s_post / s_pre wherever layout degraded the spec, else unchanged."""
    alpha = alpha.copy()
    for i, d in enumerate(goal.directions):
        worse = s_pre[i] >= s_post[i] if d == AT_LEAST else s_post[i] >= s_pre[i]
        alpha[i] = np.where(worse, s_post[i] / s_pre[i], alpha[i])
    return alpha


def parasitic_sizing(checkpoint, goal: DesignGoal, model: ParasiticModel, max_rounds: int = 3,
                     start=None, bench: Benchmark | None = None, max_steps: int = 50) -> ParasiticResult:
    """Re-deploy with discounted specs until the post-layout specs meet ``goal``."""
    if max_rounds < 1:
        raise InvariantError("max_rounds must be >= 1")
    params, bench, meta = _resolve(checkpoint, bench)
    x = np.asarray(start if start is not None else meta["start"], dtype=float)
    names = goal.specs
    rows = [QUANTITIES.index(s) for s in names]
    alpha = np.ones((len(names), len(bench.corners)))
    out = ParasiticResult(x, 0, False)
    for r in range(1, max_rounds + 1):
        out.alphas.append(alpha.copy())
        results, _ = deploy(params, [goal], start=x, max_steps=max_steps, bench=bench, discount=alpha)
        res = results[0]
        out.rounds, out.last = r, res
        if not res.success:
            return out
        x = res.params[-1]
        pre = evaluate_all_corners(bench, x, bench.corners)
        post = apply_parasitics(model, bench.graph, x, pre)
        s_pre, s_post = pre.values[rows], post.values[rows]
        out.params, out.post_specs = x.copy(), s_post
        if is_success(s_post, goal):
            out.success = True
            return out
        alpha = discount_update(alpha, s_pre, s_post, goal)
    return out


# --------------------------------------------------------------------------
# FoM optimization

@dataclass
class ParetoResult:
    method: str
    best_fom: float
    curve: np.ndarray        # best FoM after each simulation
    points: np.ndarray       # (n, 2) worst-case (power, gbw) of every simulated design
    frontier: np.ndarray     # non-dominated rows of ``points``
    best_params: np.ndarray


def pareto_frontier(points: np.ndarray) -> np.ndarray:
    """Rows of (power, gbw) not dominated by any other (lower power, higher gbw).

    Sorted by power; duplicates collapse to one row, so the result does not
    depend on the input order.
    """
    pts = np.unique(np.asarray(points, dtype=float).reshape(-1, 2), axis=0)
    if len(pts) == 0:
        return pts
    order = np.lexsort((-pts[:, 1], pts[:, 0]))   # power up, gbw down within ties
    keep, best_gbw = [], -np.inf
    for i in order:
        if pts[i, 1] > best_gbw:
            keep.append(i)
            best_gbw = pts[i, 1]
    return pts[keep]


def _worst_power_gbw(full: np.ndarray) -> np.ndarray:
    return np.stack([full[:, QUANTITIES.index("power")].max(-1), full[:, QUANTITIES.index("gbw")].min(-1)], 1)


class _Recorder:
    def __init__(self, bench: Benchmark, budget: int):
        self.bench, self.budget = bench, budget
        self.X, self.full = [], []

    def add(self, X, full):
        room = self.budget - len(self.X)
        for x, f in zip(np.atleast_2d(X)[:room], full[:room]):
            self.X.append(np.array(x))
            self.full.append(f)

    def result(self, method: str) -> ParetoResult:
        full = np.stack(self.full)
        fom = worst_case_fom(full, self.bench.c_load)
        pts = _worst_power_gbw(full)
        k = int(np.argmax(fom))
        return ParetoResult(method, float(fom[k]), np.maximum.accumulate(fom), pts, pareto_frontier(pts), self.X[k])


class _RecordingEnv(SizingEnv):
    recorder = None

    def simulate(self, X):
        full = super().simulate(X)
        if self.recorder is not None:
            self.recorder.add(X, full)
        return full


def pareto_optimize(bench: Benchmark, budget: int, method: str = "rl", rng: np.random.Generator | None = None,
                    train_cfg: TrainConfig | None = None, bo_cfg: BoConfig | None = None,
                    vanguard_sims: int = 50) -> ParetoResult:
    """Maximize worst-case FoM with ``budget`` simulations.

    ``rl`` spends up to ``vanguard_sims`` on a BO vanguard over the FoM and
    the rest on PPO with FoM rewards; ``bo`` runs GP-EI for the whole
    budget; ``random`` samples the grid uniformly. Every simulated design
    counts toward the frontier and the best FoM.
    """
    if budget <= 0:
        raise InvariantError("budget must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    rec = _Recorder(bench, budget)

    def fom_of(x):
        full = evaluate_all_corners(bench, x, bench.corners).values[None]
        rec.add(x, full)
        return float(worst_case_fom(full, bench.c_load)[0])

    if method == "random":
        X = random_params(bench.graph, rng, budget)
        for x in X:
            fom_of(x)
    elif method == "bo":
        cfg = bo_cfg or BoConfig(max_sims=budget)
        cfg = BoConfig(**{**cfg.__dict__, "max_sims": budget,
                          "init_points": min(budget, cfg.init_points or 2 * bench.graph.n_params)})
        optimize(fom_of, bench.graph, cfg, rng, stall=False)
    elif method == "rl":
        n_bo = min(vanguard_sims, budget)
        base = bo_cfg or BoConfig()
        cfg = BoConfig(**{**base.__dict__, "max_sims": n_bo,
                          "init_points": min(n_bo, base.init_points or 2 * bench.graph.n_params)})
        state = optimize(fom_of, bench.graph, cfg, rng, stall=False)
        start, best = state.best
        left = budget - len(rec.X)
        if left > 0:
            tc = train_cfg or TrainConfig()
            seed = int(rng.integers(0, 2**31 - 1))
            tc = TrainConfig(**{**tc.__dict__, "total_env_evals": left, "seed": seed, "eval_goals": 0})
            _train_recorded(bench, start, tc, FomTask(bench, scale=max(best, 1e-12)), rec)
    else:
        raise InvariantError(f"unknown method {method!r}")
    return rec.result(method)


def _train_recorded(bench, start, cfg, task, rec):
    def factory(*a, **kw):
        env = _RecordingEnv(*a, **kw)
        env.recorder = rec
        return env
    train(bench, start, cfg, task=task, env_factory=factory)
