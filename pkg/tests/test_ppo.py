import math

import numpy as np
import pytest

from analogsize.circuits import build_benchmark, feature_matrix, random_params
from analogsize.env import GoalTask, SizingEnv
from analogsize.errors import InvariantError
from analogsize.policy import Adam, action_log_probs, build_policy, policy_forward
from analogsize.ppo import (
    Batch, TrainConfig, Transition, collect_episodes, compute_gae, make_batch, normalize_advantages, ppo_loss,
    ppo_update, run_episode, train,
)
from analogsize.reward import AT_LEAST, DesignGoal, RewardConfig, episode_return

BENCH = build_benchmark("two_stage")
G = BENCH.graph


def _tr(r, v, done=False, boot=0.0):
    return Transition(None, None, None, 0.0, r, v, done, boot)


# -- GAE ----------------------------------------------------------------------

def test_gae_lambda_zero_is_td_error():
    trs = [_tr(1.0, 0.5), _tr(-0.2, 0.3), _tr(0.4, 0.1, boot=0.7)]
    adv, ret = compute_gae(trs, 0.9, 0.0)
    expect = [1.0 + 0.9 * 0.3 - 0.5, -0.2 + 0.9 * 0.1 - 0.3, 0.4 + 0.9 * 0.7 - 0.1]
    np.testing.assert_allclose(adv, expect, atol=1e-15)
    np.testing.assert_allclose(ret, adv + [0.5, 0.3, 0.1], atol=1e-15)


def test_gae_undiscounted_suffix_sums():
    trs = [_tr(-0.1, 0.0), _tr(-0.05, 0.0), _tr(10.0, 0.0, done=True)]
    adv, ret = compute_gae(trs, 1.0, 1.0)
    np.testing.assert_allclose(adv, [9.85, 9.95, 10.0], atol=1e-12)
    np.testing.assert_allclose(ret, adv)


def test_gae_single_step():
    adv, _ = compute_gae([_tr(10.0, 2.5, done=True)], 0.99, 0.95)
    assert adv[0] == 7.5


def test_gae_truncated_bootstraps_from_critic():
    adv, _ = compute_gae([_tr(-0.3, 0.2, boot=1.0)], 0.5, 0.95)
    assert adv[0] == pytest.approx(-0.3 + 0.5 - 0.2)


def test_advantage_normalization():
    a = normalize_advantages(np.random.default_rng(0).normal(3.0, 7.0, 200))
    assert abs(a.mean()) < 1e-6
    assert abs(a.std() - 1.0) < 1e-6
    np.testing.assert_array_equal(normalize_advantages(np.full(5, 2.0)), np.zeros(5))


# -- update -------------------------------------------------------------------

def _synthetic_batch(params, seed, n=48):
    rng = np.random.default_rng(seed)
    feats = feature_matrix(G, random_params(G, rng, n))
    obs = rng.uniform(-1, 1, (n, 68))
    mask = G.adjacency(self_loops=True)
    logits, _ = policy_forward(params, feats, mask, obs)
    actions = rng.integers(0, 3, (n, G.n_params))
    old = action_log_probs(logits, actions)[0].data
    return Batch(feats, obs, actions, old, normalize_advantages(rng.normal(size=n)), rng.normal(size=n)), mask


def test_ratio_identity_with_unchanged_weights():
    params = build_policy(G, 4, 16, np.random.default_rng(0))
    batch, mask = _synthetic_batch(params, 0)
    _, stats = ppo_loss(params, batch, mask, TrainConfig())
    assert stats["max_ratio_dev"] < 1e-6


def test_clipped_region_has_zero_actor_gradient():
    params = build_policy(G, 4, 16, np.random.default_rng(1))
    batch, mask = _synthetic_batch(params, 1, n=4)
    cfg = TrainConfig(value_coef=0.0, entropy_coef=0.0)
    # ratio pushed to 1 + 2 eps with positive advantage
    batch = Batch(batch.feats, batch.obs, batch.actions, batch.old_log_prob - math.log(1 + 2 * cfg.clip),
                  np.abs(batch.advantages) + 0.1, batch.returns)
    params.zero_grad()
    loss, _ = ppo_loss(params, batch, mask, cfg)
    loss.backward()
    for t in params.parameters():
        assert t.grad is None or not np.any(t.grad)


def test_loss_decreases_on_frozen_batch():
    wins = 0
    cfg = TrainConfig(epochs=4, minibatch=16)
    for seed in range(20):
        params = build_policy(G, 4, 16, np.random.default_rng(seed))
        batch, mask = _synthetic_batch(params, 100 + seed)
        before = ppo_loss(params, batch, mask, cfg)[0].item()
        ppo_update(params, Adam(params.parameters(), lr=cfg.lr), batch, mask, cfg, np.random.default_rng(seed))
        wins += ppo_loss(params, batch, mask, cfg)[0].item() < before
    assert wins >= 18


def test_empty_batch_rejected():
    params = build_policy(G, 4, 16, np.random.default_rng(0))
    batch, mask = _synthetic_batch(params, 0)
    with pytest.raises(InvariantError):
        ppo_update(params, Adam(params.parameters()), batch.take(np.arange(0)), mask, TrainConfig(),
                   np.random.default_rng(0))


# -- episodes -------------------------------------------------------------------

def _env(T=10):
    return SizingEnv(BENCH, G.midpoint(), RewardConfig(max_steps=T))


def test_goal_met_at_start_is_one_step():
    env = _env()
    rng = np.random.default_rng(0)
    while True:
        env.start = random_params(G, rng)
        s = env.goal_specs(env.simulate(env.start))[0]
        if np.all(s > 0):
            break
    dirs = tuple(g.direction for g in BENCH.goal_space)
    vals = np.array([s[i].min() * 0.9 if d == AT_LEAST else s[i].max() * 1.1 for i, d in enumerate(dirs)])
    goal = DesignGoal(env.spec_names, vals, dirs)
    params = build_policy(G, 4, 16, np.random.default_rng(0))
    ep = run_episode(env, params, goal, np.random.default_rng(0))
    assert len(ep) == 1 and ep[0].reward == 10.0 and ep[0].done


def test_episodes_bounded_and_success_ends_with_bonus():
    env = _env(T=8)
    params = build_policy(G, 4, 16, np.random.default_rng(2))
    start_full = env.simulate(env.start)[0]
    rngs = [np.random.default_rng([0, w]) for w in range(12)]
    eps, _ = collect_episodes(env, params, GoalTask(BENCH), rngs, start_full)
    for ep in eps:
        assert 1 <= len(ep) <= 8
        assert all(not t.done for t in ep[:-1])
        if ep[-1].done:
            assert ep[-1].reward == 10.0
        else:
            assert all(t.reward <= 0 for t in ep)
        assert episode_return([t.reward for t in ep]) == pytest.approx(sum(t.reward for t in ep))
    batch = make_batch(eps, TrainConfig())
    assert len(batch) == sum(len(e) for e in eps)


def test_training_accounting_and_determinism():
    cfg = TrainConfig(total_env_evals=150, workers=3, max_steps=10, eval_every=100, eval_goals=5, minibatch=32)
    a = train(BENCH, G.midpoint(), cfg)
    b = train(BENCH, G.midpoint(), cfg)
    assert a.env_evals <= cfg.total_env_evals + cfg.workers * cfg.max_steps
    assert a.env_evals >= cfg.total_env_evals
    strip = lambda tr: [{k: v for k, v in r.items() if k != "wall_ms"} for r in tr]  # noqa: E731
    assert strip(a.trace) == strip(b.trace)
    assert a.checkpoint == b.checkpoint
    keys = {"batch", "env_evals", "mean_episode_reward", "success_rate", "actor_loss", "value_loss", "entropy",
            "wall_ms"}
    assert keys <= set(a.trace[0])
    assert [r["env_evals"] for r in a.trace] == sorted(r["env_evals"] for r in a.trace)
    assert a.evals and a.best_eval is not None
