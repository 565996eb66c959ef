"""PPO training of the graph actor-critic against the sizing environment.

Each batch runs ``workers`` episodes in lockstep from the same starting
point, one sampled goal per episode. Worker w in batch b draws goals and
actions from its own generator seeded with (seed, w, b), and results are
merged in worker order, so a fixed seed reproduces the trace exactly.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import minimum
from .circuits import Benchmark
from .env import GoalTask, SizingEnv
from .errors import InvariantError, UpdateError
from .policy import (KEEP, Adam, PolicyParams, action_log_probs, apply_action, build_policy,
                     clip_grad_norm, critic_forward, policy_forward, sample_action, save_checkpoint)
from .reward import DesignGoal, RewardConfig, sample_goals


@dataclass(frozen=True)
class TrainConfig:
    total_env_evals: int = 20000
    workers: int = 6
    max_steps: int = 50
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 64
    lr: float = 3e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    eval_every: int = 2000
    eval_goals: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma <= 1 or not 0 <= self.gae_lambda <= 1 or self.clip <= 0:
            raise InvariantError("need 0 < gamma <= 1, 0 <= lambda <= 1, clip > 0")
        if self.workers < 1 or self.max_steps < 1 or self.epochs < 1 or self.minibatch < 1:
            raise InvariantError("workers, max_steps, epochs and minibatch must be positive")


@dataclass
class Transition:
    feats: np.ndarray
    obs: np.ndarray
    actions: np.ndarray
    log_prob: float
    reward: float
    value: float
    done: bool              # true terminal (goal met)
    bootstrap: float = 0.0  # V(s_{k+1}) for the last step of a truncated episode


@dataclass
class Trajectory:
    """A greedy rollout: parameters, goal-order specs and reward at each step."""

    goal: DesignGoal
    params: list = field(default_factory=list)
    specs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    success: bool = False

    @property
    def steps(self) -> int:
        return len(self.rewards)


# --------------------------------------------------------------------------
# rollouts

def _forward(params: PolicyParams, env: SizingEnv, X, goals, specs):
    feats, obs = env.observe(X, goals, specs)
    logits, _ = policy_forward(params, feats, env.mask, obs)
    values = critic_forward(params, feats, env.mask, obs).data
    return feats, obs, logits.data, values


def collect_episodes(env: SizingEnv, params: PolicyParams, task, rngs, start_full: np.ndarray):
    """One episode per generator in ``rngs``; returns (episodes, goals).

    ``start_full`` is the simulation of the starting point, shared by all
    episodes and not re-simulated.
    """
    W = len(rngs)
    T = env.max_steps
    goals = [task.sample(r) for r in rngs]
    X = np.repeat(env.start[None], W, axis=0)
    full = np.repeat(start_full[None], W, axis=0)
    episodes = [[] for _ in range(W)]
    active = list(range(W))

    # a goal already met at the start is a one-step episode that keeps everything
    if task.terminates:
        met = [w for w in active if task.score(env, full[w], goals[w])[1]]
        if met:
            feats, obs, logits, values = _forward(params, env, X[met], [goals[w] for w in met],
                                                  env.goal_specs(full[met]))
            for i, w in enumerate(met):
                a = np.full(env.graph.n_params, KEEP)
                lp = log_softmax_np(logits[i])[np.arange(len(a)), a].sum()
                r, _ = task.score(env, full[w], goals[w])
                env.n_evals += 1
                episodes[w].append(Transition(feats[i], obs[i], a, float(lp), r, float(values[i]), True))
            active = [w for w in active if w not in met]

    for t in range(T):
        if not active:
            break
        feats, obs, logits, values = _forward(params, env, X[active], [goals[w] for w in active],
                                              env.goal_specs(full[active]))
        acts = np.empty((len(active), env.graph.n_params), dtype=int)
        lps = np.empty(len(active))
        for i, w in enumerate(active):
            acts[i], lps[i], _ = sample_action(logits[i], rngs[w])
        X_new = apply_action(X[active], acts, env.graph)
        full_new = env.simulate(X_new)
        still = []
        for i, w in enumerate(active):
            X[w], full[w] = X_new[i], full_new[i]
            r, ok = task.score(env, full[w], goals[w])
            episodes[w].append(Transition(feats[i], obs[i], acts[i], float(lps[i]), r, float(values[i]), ok))
            if not ok:
                still.append(w)
        active = still
    if active:
        # truncated at T: bootstrap from the critic at the final state
        feats, obs = env.observe(X[active], [goals[w] for w in active], env.goal_specs(full[active]))
        boot = critic_forward(params, feats, env.mask, obs).data
        for i, w in enumerate(active):
            episodes[w][-1].bootstrap = float(boot[i])
    return episodes, goals


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def run_episode(env: SizingEnv, params: PolicyParams, goal: DesignGoal, rng) -> list[Transition]:
    """A single stochastic episode towards ``goal`` from ``env.start``."""

    class _Fixed(GoalTask):
        def sample(self, _rng):
            return goal

    start_full = env.simulate(env.start)[0]
    episodes, _ = collect_episodes(env, params, _Fixed(env.bench), [rng], start_full)
    return episodes[0]


def rollout_greedy(env: SizingEnv, params: PolicyParams, goals, task=None, record: bool = True):
    """Deterministic argmax rollouts, one per goal, run in lockstep.

    Step 0 evaluates the start; a goal met there ends after one step. Each
    later step applies one greedy action and simulates the result.
    """
    task = task if task is not None else GoalTask(env.bench)
    n = len(goals)
    X = np.repeat(env.start[None], n, axis=0)
    start_full = env.simulate(env.start)[0]
    full = np.repeat(start_full[None], n, axis=0)
    trajs = [Trajectory(g) for g in goals]
    active = []
    for i, g in enumerate(goals):
        r, ok = task.score(env, full[i], g)
        tr = trajs[i]
        tr.params.append(X[i].copy())
        tr.specs.append(env.goal_specs(full[i][None])[0])
        tr.rewards.append(r)
        tr.success = ok
        if not ok:
            active.append(i)
    for t in range(1, env.max_steps):
        if not active:
            break
        feats, obs = env.observe(X[active], [goals[i] for i in active], env.goal_specs(full[active]))
        logits, _ = policy_forward(params, feats, env.mask, obs)
        acts, _, _ = sample_action(logits.data, greedy=True)
        X_new = apply_action(X[active], acts, env.graph)
        full_new = env.simulate(X_new)
        still = []
        for k, i in enumerate(active):
            X[i], full[i] = X_new[k], full_new[k]
            r, ok = task.score(env, full[i], goals[i])
            tr = trajs[i]
            tr.params.append(X[i].copy())
            tr.specs.append(env.goal_specs(full[i][None])[0])
            tr.rewards.append(r)
            tr.success = ok
            if not ok:
                still.append(i)
        active = still
    return trajs


# --------------------------------------------------------------------------
# advantages and the clipped update

def compute_gae(transitions: list[Transition], gamma: float, lam: float):
    """GAE over one episode. Returns (advantages, returns), unnormalized."""
    n = len(transitions)
    adv = np.zeros(n)
    last = 0.0
    for k in range(n - 1, -1, -1):
        tr = transitions[k]
        if k == n - 1:
            next_v = 0.0 if tr.done else tr.bootstrap
        else:
            next_v = transitions[k + 1].value
        nonterm = 0.0 if tr.done else 1.0
        delta = tr.reward + gamma * next_v * nonterm - tr.value
        last = delta + gamma * lam * nonterm * (last if k < n - 1 else 0.0)
        adv[k] = last
    values = np.array([t.value for t in transitions])
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    sd = adv.std()
    return (adv - adv.mean()) / (sd if sd > 1e-8 else 1.0)


@dataclass
class Batch:
    feats: np.ndarray
    obs: np.ndarray
    actions: np.ndarray
    old_log_prob: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return len(self.actions)

    def take(self, idx) -> "Batch":
        return Batch(self.feats[idx], self.obs[idx], self.actions[idx], self.old_log_prob[idx],
                     self.advantages[idx], self.returns[idx])


def make_batch(episodes: list[list[Transition]], cfg: TrainConfig) -> Batch:
    advs, rets = [], []
    for ep in episodes:
        a, r = compute_gae(ep, cfg.gamma, cfg.gae_lambda)
        advs.append(a)
        rets.append(r)
    flat = [t for ep in episodes for t in ep]
    return Batch(
        feats=np.stack([t.feats for t in flat]),
        obs=np.stack([t.obs for t in flat]),
        actions=np.stack([t.actions for t in flat]),
        old_log_prob=np.array([t.log_prob for t in flat]),
        advantages=normalize_advantages(np.concatenate(advs)),
        returns=np.concatenate(rets),
    )


def ppo_loss(params: PolicyParams, mb: Batch, mask, cfg: TrainConfig):
    """Total loss tensor and its parts for one minibatch."""
    logits, _ = policy_forward(params, mb.feats, mask, mb.obs)
    logp, ent = action_log_probs(logits, mb.actions)
    ratio = (logp - mb.old_log_prob).exp()
    adv = mb.advantages
    surr = minimum(ratio * adv, ratio.clip(1 - cfg.clip, 1 + cfg.clip) * adv)
    actor = -surr.mean()
    v = critic_forward(params, mb.feats, mask, mb.obs)
    value = ((v - mb.returns) ** 2).mean()
    entropy = ent.mean()
    total = actor + cfg.value_coef * value - cfg.entropy_coef * entropy
    stats = dict(actor_loss=actor.item(), value_loss=value.item(), entropy=entropy.item(),
                 max_ratio_dev=float(np.max(np.abs(ratio.data - 1.0))))
    return total, stats


def ppo_update(params: PolicyParams, opt: Adam, batch: Batch, mask, cfg: TrainConfig, rng) -> dict:
    """``cfg.epochs`` passes of shuffled minibatch steps. Returns mean stats."""
    if len(batch) == 0:
        raise InvariantError("empty batch")
    acc: dict[str, list] = {}
    plist = params.parameters()
    for _ in range(cfg.epochs):
        order = rng.permutation(len(batch))
        for s in range(0, len(batch), cfg.minibatch):
            mb = batch.take(order[s:s + cfg.minibatch])
            params.zero_grad()
            loss, stats = ppo_loss(params, mb, mask, cfg)
            if not math.isfinite(loss.item()):
                raise UpdateError(f"non-finite PPO loss: {stats}")
            loss.backward()
            stats["grad_norm"] = clip_grad_norm(plist, cfg.max_grad_norm)
            opt.step()
            for k, v in stats.items():
                acc.setdefault(k, []).append(v)
    return {k: float(np.mean(v)) for k, v in acc.items()}


# --------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    params: PolicyParams            # best-by-evaluation weights
    final_params: PolicyParams
    checkpoint: str                 # serialized best weights
    trace: list                     # one dict per batch
    evals: list                     # periodic greedy evaluations
    env_evals: int
    best_eval: dict | None = None


def _clone(params: PolicyParams) -> PolicyParams:
    p = PolicyParams(params.arch, np.random.default_rng(0))
    p.copy_from(params)
    return p


def greedy_eval(env: SizingEnv, params: PolicyParams, goals) -> dict:
    trajs = rollout_greedy(env, params, goals)
    succ = np.array([t.success for t in trajs])
    steps = np.array([t.steps if t.success else env.max_steps for t in trajs])
    return dict(success_rate=float(succ.mean()), mean_steps=float(steps.mean()))


def train(bench: Benchmark, start, cfg: TrainConfig = TrainConfig(),
          reward_cfg: RewardConfig | None = None, task=None, callback=None,
          env_factory=SizingEnv) -> TrainResult:
    """Train from ``start`` until ``cfg.total_env_evals`` simulations are used.

    The count covers training rollouts only (one per step, plus one for the
    start); periodic greedy evaluations on a fixed goal set run on a
    separate environment and are reported but not charged. ``env_factory``
    builds the training environment (e.g. one that records every design).
    """
    reward_cfg = reward_cfg or RewardConfig(max_steps=cfg.max_steps)
    task = task if task is not None else GoalTask(bench)
    env = env_factory(bench, start, reward_cfg)
    eval_env = SizingEnv(bench, start, reward_cfg)
    params = build_policy(bench.graph, len(env.spec_names), len(env.corners),
                          np.random.default_rng([cfg.seed, 7919]))
    opt = Adam(params.parameters(), lr=cfg.lr)
    eval_goals = sample_goals(bench.goal_space, np.random.default_rng([cfg.seed, 104729]), cfg.eval_goals) \
        if isinstance(task, GoalTask) else []

    start_full = env.simulate(env.start)[0]
    trace, evals = [], []
    best, best_key = None, None
    next_eval = cfg.eval_every
    batch_id = 0

    def maybe_eval(force=False):
        nonlocal best, best_key, next_eval
        if not eval_goals:
            return
        if not force and env.n_evals < next_eval:
            return
        while next_eval <= env.n_evals:
            next_eval += cfg.eval_every
        res = greedy_eval(eval_env, params, eval_goals)
        res["env_evals"] = env.n_evals
        evals.append(res)
        key = (res["success_rate"], -res["mean_steps"])
        if best_key is None or key > best_key:
            best_key, best = key, (_clone(params), res)

    while env.n_evals < cfg.total_env_evals:
        t0 = time.perf_counter()
        rngs = [np.random.default_rng([cfg.seed, w, batch_id]) for w in range(cfg.workers)]
        episodes, _ = collect_episodes(env, params, task, rngs, start_full)
        batch = make_batch(episodes, cfg)
        stats = ppo_update(params, opt, batch, env.mask, cfg, np.random.default_rng([cfg.seed, 1 << 20, batch_id]))
        ep_rewards = [sum(t.reward for t in ep) for ep in episodes]
        row = dict(batch=batch_id, env_evals=env.n_evals, mean_episode_reward=float(np.mean(ep_rewards)),
                   success_rate=float(np.mean([ep[-1].done for ep in episodes])),
                   mean_episode_length=float(np.mean([len(ep) for ep in episodes])),
                   actor_loss=stats["actor_loss"], value_loss=stats["value_loss"],
                   entropy=stats["entropy"], wall_ms=1e3 * (time.perf_counter() - t0))
        trace.append(row)
        if callback is not None:
            callback(row, params, env)
        batch_id += 1
        maybe_eval()
    maybe_eval(force=not evals or evals[-1]["env_evals"] != env.n_evals)

    final = _clone(params)
    if best is None:
        best_params, best_res = final, None
    else:
        best_params, best_res = best
    meta = dict(benchmark=bench.name, start=[float(v) for v in env.start],
                normalization=env.norm.as_dict(), spec_names=list(env.spec_names),
                n_corners=len(env.corners), env_evals=env.n_evals, seed=cfg.seed)
    return TrainResult(best_params, final, save_checkpoint(best_params, meta), trace, evals,
                       env.n_evals, best_res)


def train_without_vanguard(bench: Benchmark, cfg: TrainConfig = TrainConfig(), **kw) -> TrainResult:
    """Control run: start from the mid-grid parameter vector instead of a BO result."""
    return train(bench, bench.graph.midpoint(), cfg, **kw)
