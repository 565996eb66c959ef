"""Command line entry point.

    analogsize all --config exp.yaml --out runs/a
    analogsize deploy --out runs/a --goals 200
    analogsize plot-data --out runs/a

A run directory holds ``config.yaml`` (the effective configuration),
``results.jsonl``, ``vanguard.json``, ``checkpoint.json`` and ``plots/``.
Set ``ANALOGSIZE_THREADS`` to evaluate corners on a thread pool.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .bo import run_vanguard_repeats
from .circuits import build_benchmark
from .config import ExperimentConfig, config_from_dict, parse_config
from .deploy import deploy, export_failure, parasitic_sizing, pareto_optimize, render_failure_table
from .errors import SizingError
from .logs import ResultsLog, emit_plot_data
from .ppo import train
from .reward import sample_goals

SUBCOMMANDS = ("vanguard", "train", "deploy", "parasitic", "pareto", "all", "plot-data")

# fixed rng streams per stage, all derived from the experiment seed
_BO_STREAM, _GOAL_STREAM, _PARETO_STREAM = 11, 2024, 31337


class RunDir:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.root = Path(cfg.out_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.log = ResultsLog(self.root / "results.jsonl")
        self.vanguard = self.root / "vanguard.json"
        self.checkpoint = self.root / "checkpoint.json"
        self.plots = self.root / "plots"

    def snapshot(self):
        (self.root / "config.yaml").write_text(self.cfg.dump(), encoding="utf-8")

    def start(self) -> np.ndarray:
        if not self.vanguard.exists():
            raise SizingError(f"no vanguard result at {self.vanguard}; run the vanguard stage first")
        return np.asarray(json.loads(self.vanguard.read_text())["start"], dtype=float)


def stage_vanguard(run: RunDir) -> np.ndarray:
    cfg = run.cfg
    bench = build_benchmark(cfg.benchmark)
    x, state, bests = run_vanguard_repeats(bench, cfg.bo_repeats, cfg.bo,
                                           np.random.default_rng([cfg.seed, _BO_STREAM]))
    for i, ((xi, r), row) in enumerate(zip(state.history, state.trace)):
        run.log.append("bo", dict(iteration=i, phase=row["phase"], params=xi, reward=r,
                                  best_so_far=row["best"]), wall_ms=row["wall_ms"])
    run.vanguard.write_text(json.dumps(dict(benchmark=bench.name, start=[float(v) for v in x],
                                            best_reward=float(state.best[1]),
                                            repeat_bests=[float(b) for b in bests])), encoding="utf-8")
    return x


def stage_train(run: RunDir):
    cfg = run.cfg
    bench = build_benchmark(cfg.benchmark)
    tc = cfg.train.__class__(**{**cfg.train.__dict__, "seed": cfg.seed})
    res = train(bench, run.start(), tc, cfg.reward)
    evals = {e["env_evals"]: e for e in res.evals}
    done = set()
    for row in res.trace:
        payload = {k: v for k, v in row.items() if k != "wall_ms"}
        # attach periodic greedy evaluations to the batch that triggered them
        hits = [e for k, e in evals.items() if k <= row["env_evals"] and k not in done]
        payload["eval"] = hits[-1] if hits else None
        done.update(k for k, _ in evals.items() if k <= row["env_evals"])
        run.log.append("train", payload, wall_ms=row["wall_ms"])
    run.checkpoint.write_text(res.checkpoint, encoding="utf-8")
    return res


def _goals(cfg: ExperimentConfig, bench):
    return sample_goals(bench.goal_space, np.random.default_rng([cfg.seed, _GOAL_STREAM]), cfg.goals)


def _checkpoint(run: RunDir, path) -> str:
    p = Path(path) if path else run.checkpoint
    if not p.exists():
        raise SizingError(f"checkpoint not found: {p}; train first or pass --checkpoint")
    return p.read_text(encoding="utf-8")


def stage_deploy(run: RunDir, checkpoint=None):
    cfg = run.cfg
    bench = build_benchmark(cfg.benchmark)
    text = _checkpoint(run, checkpoint)
    results, metrics = deploy(text, _goals(cfg, bench), start=None, max_steps=cfg.reward.max_steps,
                              bench=bench, reward_cfg=cfg.reward)
    for i, r in enumerate(results):
        run.log.append("deploy", dict(goal_index=i, goal=r.goal.as_dict(), success=r.success, steps=r.steps,
                                      best_step=r.best_step, final_reward=r.rewards[-1],
                                      final_params=r.params[-1]))
    for i, r in enumerate(results):
        if not r.success:
            rep = export_failure(r, bench.graph.param_names)
            run.log.append("failure", dict(goal_index=i, **rep.as_record(), table=render_failure_table(rep)))
    run.log.append("deploy", dict(summary=True, n_goals=metrics.n_goals, n_success=metrics.n_success,
                                  n_step=metrics.n_step),
                   t_sim=metrics.t_sim, fom_deploy=metrics.fom_deploy)
    return metrics


def stage_parasitic(run: RunDir, checkpoint=None):
    cfg = run.cfg
    bench = build_benchmark(cfg.benchmark)
    text = _checkpoint(run, checkpoint)
    out = []
    for i, g in enumerate(_goals(cfg, bench)):
        res = parasitic_sizing(text, g, cfg.parasitic, cfg.max_rounds, bench=bench,
                               max_steps=cfg.reward.max_steps)
        run.log.append("parasitic", dict(goal_index=i, goal=g.as_dict(), rounds=res.rounds, success=res.success,
                                         params=res.params, alpha=res.alphas[-1]))
        out.append(res)
    return out


def stage_pareto(run: RunDir):
    cfg = run.cfg
    bench = build_benchmark(cfg.benchmark)
    tc = cfg.train.__class__(**{**cfg.train.__dict__, "seed": cfg.seed})
    res = pareto_optimize(bench, cfg.budget, cfg.pareto_method, np.random.default_rng([cfg.seed, _PARETO_STREAM]),
                          train_cfg=tc, bo_cfg=cfg.bo)
    for p, g in res.frontier:
        run.log.append("pareto", dict(method=res.method, power=p, gbw=g, best_fom=res.best_fom))
    return res


def cmd_run(subcommand: str, cfg: ExperimentConfig, checkpoint=None, out=sys.stdout) -> int:
    """Run one pipeline stage (or ``all``) and return the exit status."""
    if subcommand not in SUBCOMMANDS:
        print(f"error: unknown subcommand {subcommand!r}", file=sys.stderr)
        return 2
    try:
        run = RunDir(cfg)
        if subcommand != "plot-data":
            run.snapshot()
        t0 = time.perf_counter()
        if subcommand in ("vanguard", "all"):
            stage_vanguard(run)
        if subcommand in ("train", "all"):
            res = stage_train(run)
            if res.best_eval:
                print(f"train: best greedy success {res.best_eval['success_rate']:.3f}", file=out)
        if subcommand in ("deploy", "all"):
            m = stage_deploy(run, checkpoint)
            print(f"deploy: success {m.n_success:.3f}, mean steps {m.n_step:.2f}, "
                  f"FoM_deploy {m.fom_deploy:.1f}/s", file=out)
        if subcommand == "parasitic":
            rs = stage_parasitic(run, checkpoint)
            print(f"parasitic: {sum(r.success for r in rs)}/{len(rs)} goals met after layout", file=out)
        if subcommand == "pareto":
            r = stage_pareto(run)
            print(f"pareto: best FoM {r.best_fom:.3f} MHz*pF/uW, {len(r.frontier)} frontier points", file=out)
        if subcommand in ("plot-data", "all"):
            if not run.log.path.exists():
                run.log.path.touch()
            emit_plot_data(run.log.path, run.plots)
        print(f"{subcommand}: done in {time.perf_counter() - t0:.1f} s ({run.root})", file=out)
        return 0
    except (SizingError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="analogsize", description="Analog circuit sizing with a BO start and PPO.")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="YAML experiment config")
    ap.add_argument("--seed", type=int, help="overrides the config seed")
    ap.add_argument("--out", help="run directory (overrides out_dir)")
    ap.add_argument("--bo-repeats", type=int)
    ap.add_argument("--budget", type=int, help="simulation budget for pareto mode")
    ap.add_argument("--goals", type=int, help="deployment goal count (default 200)")
    ap.add_argument("--benchmark")
    ap.add_argument("--checkpoint", help="checkpoint for deploy/parasitic (default: <out>/checkpoint.json)")
    return ap


def config_from_args(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else config_from_dict({})
    over = dict(seed=args.seed, out_dir=args.out, bo_repeats=args.bo_repeats, budget=args.budget,
                goals=args.goals, benchmark=args.benchmark)
    over = {k: v for k, v in over.items() if v is not None}
    return config_from_dict({**cfg.to_dict(), **over}) if over else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
    except SizingError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return cmd_run(args.subcommand, cfg, checkpoint=args.checkpoint)


if __name__ == "__main__":
    sys.exit(main())
