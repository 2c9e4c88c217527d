"""Command-line entry point.

Verbs: gen-demos, train, eval, gradcheck, plot. Every command is
deterministic given its config and seed, exits 0 on success, and prints
a single-line `error: ...` to stderr otherwise. Outputs are written
temp-file-then-rename, so interrupted runs never leave partial files.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from . import policy as P
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config
from .demos import DemoDataset, generate_demos, load_demos
from .env import TaskSpec, expert_policy, run_episode
from .errors import ConfigError
from .plotting import plot_metrics
from .training import (
    MetricsWriter,
    StageSchedule,
    evaluate,
    run_two_stage,
    train_stage,
)

TRAIN_EVAL_SEED_BASE = 10_000  # rollout seeds used for during-training evaluation
FRESH_EVAL_SEED_BASE = 20_000  # held-out rollout seeds used by `eval`


def _task_spec(cfg: RunConfig) -> TaskSpec:
    return TaskSpec(
        task=cfg.task,
        particles=cfg.particles,
        max_episode_steps=cfg.max_episode_steps,
    )


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    if getattr(args, "single_stage", False) or getattr(args, "no_finetune", False):
        cfg.mode = "single_stage"
    if getattr(args, "no_attention", False):
        cfg.policy = dataclasses.replace(cfg.policy, use_attention=False)
    return cfg


def cmd_gen_demos(args) -> int:
    cfg = _load_config(args)
    task = _task_spec(cfg)
    demos = generate_demos(
        task,
        cfg.demo_count,
        seed_base=cfg.seed,
        out_path=cfg.demos_path,
        sim_substeps=cfg.train.sim_steps_per_env_step,
        n_points=cfg.policy.n_points,
    )
    print(f"wrote {len(demos)} episodes to {cfg.demos_path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    task = _task_spec(cfg)
    file_task, demos = load_demos(cfg.demos_path)
    if file_task != cfg.task:
        raise ConfigError(f"demo file is for task {file_task!r}, config says {cfg.task!r}")
    dataset = DemoDataset(demos)
    if dataset.n_points != cfg.policy.n_points:
        raise ConfigError(
            f"demo clouds have {dataset.n_points} points, config says {cfg.policy.n_points}"
        )
    init = P.init_params(cfg.seed, cfg.policy)
    writer = MetricsWriter(cfg.metrics_path)
    try:
        if cfg.mode == "two_stage":
            best, _ = run_two_stage(
                cfg.train, cfg.schedule, dataset, task, cfg.policy, init,
                eval_seed_base=TRAIN_EVAL_SEED_BASE, writer=writer,
            )
        else:
            best, _ = train_stage(
                cfg.train, dataset, task, cfg.policy, init,
                stage=1, eval_seed_base=TRAIN_EVAL_SEED_BASE, writer=writer,
            )
    finally:
        writer.close()
    save_checkpoint(cfg.checkpoint_path, best)
    print(f"best success {best.best_score:.3f} (step {best.step}); checkpoint {cfg.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    task = _task_spec(cfg)
    if args.expert:
        successes = 0
        for i in range(cfg.train.eval_episodes):
            result, _ = run_episode(
                task, FRESH_EVAL_SEED_BASE + i, expert_policy(task),
                cfg.train.sim_steps_per_env_step, cfg.policy.n_points,
            )
            successes += int(result.success)
        rate = successes / cfg.train.eval_episodes
        print(f"success_rate {rate:.3f}")
        return 0
    path = args.checkpoint or cfg.checkpoint_path
    ckpt = load_checkpoint(path)
    rate = evaluate(
        ckpt.params, ckpt.config, task, cfg.train.eval_episodes,
        FRESH_EVAL_SEED_BASE, cfg.train.sim_steps_per_env_step,
    )
    print(f"success_rate {rate:.3f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_full_suite

    cfg = _load_config(args)
    results, sim_count = run_full_suite(seed=cfg.seed)
    failures = [r for r in results if not r.ok]
    for r in results:
        mark = "ok " if r.ok else "FAIL"
        print(f"{mark} {r.name}: max rel err {r.max_rel_err:.3e} (tol {r.tolerance:.0e})")
    print(f"similarity matrices per forward pass: {sim_count}")
    if sim_count != 1:
        print("error: expected exactly one similarity product per forward", file=sys.stderr)
        return 1
    if failures:
        names = ", ".join(r.name for r in failures)
        print(f"error: gradient check failed for {names}", file=sys.stderr)
        return 1
    return 0


def cmd_plot(args) -> int:
    cfg = _load_config(args)
    metrics = args.metrics or cfg.metrics_path
    out = args.out or cfg.plot_path
    summary = plot_metrics(metrics, out)
    print(f"{summary}; plot {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gp2e")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run-config file (key = value with [section] headers)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("gen-demos", help="roll the scripted expert and write a demo file")
    common(p)

    p = sub.add_parser("train", help="behavior-clone a policy from a demo file")
    common(p)
    p.add_argument("--single-stage", action="store_true", help="train stage 1 only")
    p.add_argument("--no-finetune", action="store_true", help="alias of --single-stage")
    p.add_argument("--no-attention", action="store_true",
                   help="replace attention with a per-point projection (ablation)")

    p = sub.add_parser("eval", help="closed-loop evaluation on held-out seeds")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint to evaluate")
    p.add_argument("--expert", action="store_true", help="evaluate the scripted expert instead")

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    common(p)

    p = sub.add_parser("plot", help="render the training curve to SVG")
    common(p)
    p.add_argument("--metrics", help="metrics CSV (default: config metrics path)")
    p.add_argument("--out", help="output SVG path (default: config plot path)")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "gen-demos": cmd_gen_demos,
        "train": cmd_train,
        "eval": cmd_eval,
        "gradcheck": cmd_gradcheck,
        "plot": cmd_plot,
    }
    try:
        return handlers[args.command](args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
