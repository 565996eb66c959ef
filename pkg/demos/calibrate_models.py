"""Probe how many random goals a greedy neighbourhood climber can meet.

Used to tune the per-benchmark constants in ``analogsize.simulator``.
Each step samples 2000 random +/-1 grid moves around the current sizing
and keeps the best one by summed worst-corner margin. A goal counts as
met when every margin reaches zero within 50 steps.

    python demos/calibrate_models.py two_stage
    python demos/calibrate_models.py two_stage '{"mu_n": 3e-4}' 30
"""

import json
import sys
import time

import numpy as np

import analogsize.simulator as S
from analogsize.bo import run_vanguard
from analogsize.circuits import AT_LEAST, build_benchmark, clamp_to_grid
from analogsize.reward import sample_goals


def probe(name, overrides=None, n_goals=60, moves=2000, max_steps=50):
    if overrides:
        S.CONSTANTS[name].update(overrides)
    b = build_benchmark(name)
    g = b.graph
    x0, _ = run_vanguard(b, rng=np.random.default_rng(0))
    rows = [S.QUANTITIES.index(s.spec) for s in b.goal_space]
    sign = np.array([1 if s.direction == AT_LEAST else -1 for s in b.goal_space])
    goals = sample_goals(b.goal_space, np.random.default_rng(2), n_goals)
    rng = np.random.default_rng(3)

    def score(X, gv):
        R = S.evaluate_batch(b, X, b.corners)[:, rows] * sign[None, :, None]
        gs = (gv * sign)[None, :, None]
        m = np.minimum((R - gs) / (np.abs(R) + np.abs(gs)), 0)
        return m.sum(1).mean(1)

    lens = []
    for goal in goals:
        x = x0.copy()
        r, t = score(x[None], goal.values)[0], 1
        while r < 0 and t < max_steps:
            A = rng.integers(-1, 2, (moves, len(x)))
            C = clamp_to_grid(np.clip(x + A * g.step(), g.lower(), g.upper()), g.slots)
            rs = score(C, goal.values)
            k = np.argmax(rs)
            x, r, t = C[k], rs[k], t + 1
        lens.append(t if r >= 0 else None)
    met = [n for n in lens if n is not None]
    return len(met) / len(lens), (np.mean(met) if met else float("nan"))


if __name__ == "__main__":
    name = sys.argv[1] if len(sys.argv) > 1 else "two_stage"
    over = json.loads(sys.argv[2]) if len(sys.argv) > 2 and sys.argv[2] else None
    n = int(sys.argv[3]) if len(sys.argv) > 3 else 60
    t0 = time.time()
    frac, steps = probe(name, over, n)
    print(f"{name}: met {frac:.1%} of {n} goals, mean steps when met {steps:.1f}, {time.time() - t0:.0f}s")
