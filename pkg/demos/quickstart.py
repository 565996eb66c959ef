"""Small end-to-end run: vanguard, a short PPO run, deployment on a few goals.

Finishes in a couple of minutes on one core. The numbers are not meant to
be good; raise ``total_env_evals`` to 20000 for a real run.
"""

import numpy as np

from analogsize.bo import BoConfig, run_vanguard
from analogsize.circuits import build_benchmark
from analogsize.deploy import deploy, export_failure, render_failure_table
from analogsize.ppo import TrainConfig, train
from analogsize.reward import sample_goals

bench = build_benchmark("two_stage")
start, state = run_vanguard(bench, BoConfig(), np.random.default_rng(0))
print(f"vanguard: {len(state.history)} sims, best reward {state.best[1]:.4f}")

res = train(bench, start, TrainConfig(total_env_evals=2000, eval_every=1000, eval_goals=10))
print(f"train: {res.env_evals} env evals, best eval {res.best_eval}")

goals = sample_goals(bench.goal_space, np.random.default_rng(1), 10)
results, m = deploy(res.checkpoint, goals, max_steps=50)
print(f"deploy: success {m.n_success:.0%}, mean steps {m.n_step:.1f}")
fails = [r for r in results if not r.success]
if fails:
    print(render_failure_table(export_failure(fails[0], bench.graph.param_names)))
