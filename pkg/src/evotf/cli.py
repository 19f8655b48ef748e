"""Command-line front end: ``evotf <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CHECKPOINT = 4
EXIT_NUMERIC = 5

log = logging.getLogger("evotf")


def _model_config(name: str):
    from .model import ModelConfig

    if name == "default":
        return ModelConfig()
    if name == "reduced":
        return ModelConfig.reduced()
    if name == "micro":
        return ModelConfig.micro()
    return ModelConfig.ablation(name)


def _make_task(name: str, dims: int, seed: int):
    from . import rng as rnglib
    from .tasks import FUNCTIONS, ControlTask, OFFSET_RANGE, TaskSpec

    if name in ("cartpole", "pendulum"):
        return ControlTask(name, seed=seed)
    if name not in FUNCTIONS:
        raise ValueError(f"unknown task {name!r}")
    offset = rnglib.uniform(rnglib.split(rnglib.key(seed), "offset"), dims, -OFFSET_RANGE, OFFSET_RANGE)
    return TaskSpec(name, dims, tuple(float(v) for v in offset), seed)


def cmd_train_ead(a):
    from .ead import EadConfig, train_ead

    cfg = EadConfig(teacher=a.teacher, tasks=a.tasks, steps=a.steps, batch=a.batch, dims=a.dims,
                    popsize=a.popsize, generations=a.generations, lr=a.lr, seed=a.seed, eval_every=a.eval_every,
                    checkpoint_every=a.checkpoint_every, eval_cartpole=not a.no_cartpole,
                    model=_model_config(a.model))
    train_ead(cfg, a.out)
    print(f"checkpoint written to {Path(a.out) / 'final'}")


def cmd_train_meta(a):
    from .metaevo import MetaConfig, train_meta

    cfg = MetaConfig(meta_pop=a.pop, meta_generations=a.gens, task_batch=a.tasks_per_gen, meta_sigma_init=a.sigma,
                     init=a.init, tasks=a.tasks, seed=a.seed, checkpoint_every=a.checkpoint_every,
                     model=_model_config(a.model))
    train_meta(cfg, a.out)
    print(f"checkpoint written to {Path(a.out) / 'final'}")


def cmd_train_sread(a):
    from .sread import SreadConfig, train_sread

    cfg = SreadConfig(offspring=a.offspring, sigma0=a.sigma0, decay=a.decay, tasks=a.tasks, iterations=a.iters,
                      buffer_size=a.buffer, init=a.init, seed=a.seed, checkpoint_every=a.checkpoint_every,
                      model=_model_config(a.model))
    train_sread(cfg, a.out)
    print(f"checkpoint written to {Path(a.out) / 'final'}")


def cmd_run(a):
    from .evaluate import as_strategy, holdout_start
    from .metrics import MetricsWriter
    from .rollout import run_strategy

    strategy = as_strategy(a.strategy, a.context, a.lr_mean, a.lr_sigma)
    task = _make_task(a.task, a.dims, a.seed)
    mean0, sigma0 = holdout_start(a.seed, task.dims)
    res = run_strategy(strategy, task, a.generations, a.popsize, a.seed, mean0, sigma0)
    with MetricsWriter(Path(a.out) / "metrics.jsonl") as mw:
        for g in range(len(res.best_per_gen)):
            mw.write(generation=g + 1, best=res.best_per_gen[g], best_so_far=res.best_so_far[g],
                     mean_sigma=float(res.sigmas[g + 1].mean()))
    print(f"final best-so-far {res.final_best:.6g}" + (" (rollout failed)" if res.failed else ""))
    return EXIT_NUMERIC if res.failed else EXIT_OK


def cmd_props(a):
    from .evaluate import run_properties
    from .metrics import MetricsWriter

    reports = run_properties(a.strategy, seed=a.seed, trials=a.trials)
    with MetricsWriter(Path(a.out) / "metrics.jsonl") as mw:
        for r in reports:
            mw.write(**r.to_dict())
    for r in reports:
        print(r.line())


def cmd_bench(a):
    from .evaluate import benchmark

    tasks = {name: _make_task(name, a.dims, a.seed) for name in a.tasks}
    strategies = {Path(s).name if Path(s).exists() else s: s for s in a.strategies}
    seeds = [a.seed + i for i in range(a.seeds)]
    rows = benchmark(strategies, tasks, seeds, a.generations, a.popsize, Path(a.out) / "bench.csv")
    print(f"{len(rows)} rows written to {Path(a.out) / 'bench.csv'}")


def cmd_attn(a):
    from .checkpoint import load_checkpoint
    from .evaluate import export_attention

    params, cfg, _ = load_checkpoint(a.ckpt)
    task = _make_task(a.task, a.dims, a.seed)
    doc = export_attention(params, cfg, task, a.seed, a.generations, a.popsize, a.context,
                           Path(a.out) / "attention.json")
    print("maps: " + ", ".join(f"{k} {v['shape']}" for k, v in doc.items()))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="YAML file of option defaults")
    common.add_argument("--out", default="runs/out")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--log-level", default="WARNING")

    p = argparse.ArgumentParser(prog="evotf", description="Evolution Transformer toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-ead", parents=[common], help="distill a teacher ES")
    s.add_argument("--teacher", default="snes", choices=["snes", "sepcmaes", "openes", "hillclimb"])
    s.add_argument("--tasks", default="medium", choices=["small", "medium", "large"])
    s.add_argument("--steps", type=int, default=5000)
    s.add_argument("--batch", type=int, default=32)
    s.add_argument("--dims", type=int, default=5)
    s.add_argument("--popsize", type=int, default=10)
    s.add_argument("--generations", type=int, default=32)
    s.add_argument("--lr", type=float, default=0.0015)
    s.add_argument("--eval-every", type=int, default=500)
    s.add_argument("--checkpoint-every", type=int, default=500)
    s.add_argument("--no-cartpole", action="store_true", help="skip the CartPole hold-out evaluation")
    s.add_argument("--model", default="default")
    s.set_defaults(func=cmd_train_ead)

    s = sub.add_parser("train-meta", parents=[common], help="meta-evolve model weights")
    s.add_argument("--init", default="random", help="'random' or a checkpoint directory")
    s.add_argument("--pop", type=int, default=256)
    s.add_argument("--gens", type=int, default=1000)
    s.add_argument("--tasks-per-gen", type=int, default=64)
    s.add_argument("--tasks", default="medium", choices=["small", "medium", "large"])
    s.add_argument("--sigma", type=float, default=0.005)
    s.add_argument("--checkpoint-every", type=int, default=100)
    s.add_argument("--model", default="reduced")
    s.set_defaults(func=cmd_train_meta)

    s = sub.add_parser("train-sread", parents=[common], help="self-referential distillation")
    s.add_argument("--sigma0", type=float, default=0.004)
    s.add_argument("--decay", type=float, default=0.99999)
    s.add_argument("--offspring", type=int, default=64)
    s.add_argument("--iters", type=int, default=1000)
    s.add_argument("--buffer", type=int, default=32)
    s.add_argument("--tasks", default="medium", choices=["small", "medium", "large"])
    s.add_argument("--init", default="random", help="'random' or a checkpoint directory")
    s.add_argument("--checkpoint-every", type=int, default=500)
    s.add_argument("--model", default="default")
    s.set_defaults(func=cmd_train_sread)

    def rollout_opts(s, strategy=True):
        if strategy:
            s.add_argument("--strategy", default="snes", help="teacher name or checkpoint directory")
        s.add_argument("--dims", type=int, default=5)
        s.add_argument("--popsize", type=int, default=10)
        s.add_argument("--generations", type=int, default=32)
        s.add_argument("--context", type=int, default=5)

    s = sub.add_parser("run", parents=[common], help="one rollout of a strategy")
    rollout_opts(s)
    s.add_argument("--task", default="sphere")
    s.add_argument("--lr-mean", type=float, default=1.0)
    s.add_argument("--lr-sigma", type=float, default=1.0)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("props", parents=[common], help="unbiasedness / translation / scale checks")
    s.add_argument("--strategy", default="snes", help="teacher name or checkpoint directory")
    s.add_argument("--trials", type=int, default=64)
    s.set_defaults(func=cmd_props)

    s = sub.add_parser("bench", parents=[common], help="strategies x tasks x seeds table")
    rollout_opts(s, strategy=False)
    s.add_argument("--strategies", nargs="+", default=["snes", "random"])
    s.add_argument("--tasks", nargs="+", default=["sphere"])
    s.add_argument("--seeds", type=int, default=10)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("attn", parents=[common], help="export attention maps")
    rollout_opts(s, strategy=False)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--task", default="sphere")
    s.set_defaults(func=cmd_attn, generations=5)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    with open(args.config) as fh:
        values = yaml.safe_load(fh) or {}
    if not isinstance(values, dict):
        raise ValueError("config file must hold a mapping of option names to values")
    values = {k.replace("-", "_"): v for k, v in values.items()}
    unknown = sorted(set(values) - set(vars(args)))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    # flags given on the command line win over the file
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .ead import TrajectoryRejected

    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except (OSError, ValueError, yaml.YAMLError) as exc:
        print(f"evotf: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")

    import torch

    torch.set_num_threads(max(1, args.threads))
    torch.use_deterministic_algorithms(True)
    try:
        code = args.func(args)
    except CheckpointError as exc:
        print(f"evotf: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (FloatingPointError, TrajectoryRejected) as exc:
        print(f"evotf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"evotf: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
