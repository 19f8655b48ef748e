"""Property checks, benchmarking and attention-map export."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rnglib
from .checkpoint import load_checkpoint
from .features import PathState, featurize, stack_features
from .model import attention_maps
from .rollout import EvoTfStrategy, init_distribution, run_strategy
from .tasks import TaskSpec, sample_task
from .teachers import Strategy, make_teacher

__all__ = [
    "RandomFitness",
    "LinearFitness",
    "PropertyReport",
    "as_strategy",
    "holdout_start",
    "sphere_holdout",
    "check_unbiasedness",
    "check_translation_invariance",
    "check_scale_adaptation",
    "run_properties",
    "benchmark",
    "write_benchmark_csv",
    "export_attention",
]

PROPERTY_DIMS = 3
PROPERTY_POP = 5


@dataclass(frozen=True)
class RandomFitness:
    """f(x) ~ N(0, 1), drawn fresh for every candidate."""

    dims: int
    stochastic = True

    def __call__(self, X, key):
        return rnglib.normal(key, np.shape(X)[:-1])


@dataclass(frozen=True)
class LinearFitness:
    """f(x) = sum_d x_d."""

    dims: int

    def __call__(self, X):
        return np.asarray(X, dtype=np.float64).sum(axis=-1)


@dataclass
class PropertyReport:
    name: str
    passed: bool
    stats: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def line(self) -> str:
        return f"{self.name}: {'PASS' if self.passed else 'FAIL'}"


def as_strategy(obj, context: int = 5, lr_mean: float = 1.0, lr_sigma: float = 1.0) -> Strategy:
    """A Strategy from a Strategy, a teacher name or a checkpoint directory."""
    if isinstance(obj, Strategy):
        return obj
    if isinstance(obj, str) and not Path(obj).exists():
        return make_teacher(obj)
    params, cfg, _ = load_checkpoint(obj)
    return EvoTfStrategy(params, cfg, context, lr_mean, lr_sigma)


def holdout_start(seed: int, dims: int) -> tuple[np.ndarray, np.ndarray]:
    return init_distribution(rnglib.split(rnglib.key(seed), "init"), dims)


def sphere_holdout(strategy: Strategy, seeds, dims: int = 5, popsize: int = 10, generations: int = 32) -> list[float]:
    """Final best-so-far on one randomly offset Sphere per seed."""
    finals = []
    for s in seeds:
        task = sample_task("small", dims, rnglib.split(rnglib.key(s), "task"))
        mean0, sigma0 = holdout_start(s, dims)
        finals.append(run_strategy(strategy, task, generations, popsize, s, mean0, sigma0).final_best)
    return finals


def _seeds(seed: int, trials: int) -> list[int]:
    return [seed * 100_003 + i for i in range(trials)]


def check_unbiasedness(strategy, trials: int = 64, generations: int = 32, seed: int = 0) -> PropertyReport:
    """Mean drift of the search mean on pure-noise fitness, per coordinate.

    Passes when every coordinate satisfies ``|mean drift| <= 3 * SE``.
    """
    strategy = as_strategy(strategy)
    task = RandomFitness(PROPERTY_DIMS)
    drifts = []
    for s in _seeds(seed, trials):
        mean0, sigma0 = holdout_start(s, PROPERTY_DIMS)
        res = run_strategy(strategy, task, generations, PROPERTY_POP, s, mean0, sigma0)
        drifts.append(res.final_mean - mean0)
    drifts = np.array(drifts)
    drift = drifts.mean(axis=0)
    se = drifts.std(axis=0, ddof=1) / math.sqrt(trials)
    passed = bool(np.all(np.abs(drift) <= 3.0 * se))
    return PropertyReport("unbiasedness", passed, {"drift": drift.tolist(), "se": se.tolist(), "trials": trials})


def check_translation_invariance(strategy, offsets=(-2.0, 0.0, 2.0), trials: int = 16, generations: int = 32,
                                 seed: int = 0) -> PropertyReport:
    """Sphere runs shifted by ``b`` in every coordinate, start shifted alike.

    Passes when the largest and smallest median final fitness across offsets
    are within a factor 2.
    """
    strategy = as_strategy(strategy)
    medians, distances, finals_by_offset = [], [], {}
    for b in offsets:
        shift = np.full(PROPERTY_DIMS, float(b))
        task = TaskSpec("sphere", PROPERTY_DIMS, tuple(shift.tolist()))
        finals, dist = [], []
        for s in _seeds(seed, trials):
            mean0, sigma0 = holdout_start(s, PROPERTY_DIMS)
            res = run_strategy(strategy, task, generations, PROPERTY_POP, s, mean0 + shift, sigma0)
            finals.append(res.final_best)
            dist.append(float(np.linalg.norm(res.final_mean - shift)))
        finals_by_offset[str(b)] = finals
        medians.append(float(np.median(finals)))
        distances.append(float(np.median(dist)))
    lo, hi = min(medians), max(medians)
    ratio = hi / lo if lo > 0 else (1.0 if hi == 0 else math.inf)
    return PropertyReport(
        "translation_invariance", bool(ratio <= 2.0),
        {"offsets": list(offsets), "median_final_fitness": medians, "median_distance": distances,
         "ratio": ratio, "final_fitness": finals_by_offset},
    )


def check_scale_adaptation(strategy, trials: int = 16, generations: int = 32, seed: int = 0) -> PropertyReport:
    """Scale growth on a linear slope.

    Passes when the median over seeds of ``mean(sigma_G) / mean(sigma_1)``
    exceeds 1, where ``sigma_1`` is the scale generation 1 samples with.
    """
    strategy = as_strategy(strategy)
    task = LinearFitness(PROPERTY_DIMS)
    growth = []
    for s in _seeds(seed, trials):
        mean0, sigma0 = holdout_start(s, PROPERTY_DIMS)
        res = run_strategy(strategy, task, generations, PROPERTY_POP, s, mean0, sigma0)
        growth.append(float(res.sigmas[-1].mean() / res.sigmas[0].mean()))
    med = float(np.median(growth))
    return PropertyReport("scale_adaptation", bool(med > 1.0), {"median_growth": med, "growth": growth})


def run_properties(strategy, seed: int = 0, trials: int = 64) -> list[PropertyReport]:
    strategy = as_strategy(strategy)
    return [
        check_unbiasedness(strategy, trials=trials, seed=seed),
        check_translation_invariance(strategy, seed=seed),
        check_scale_adaptation(strategy, seed=seed),
    ]


BENCH_HEADER = ("strategy", "task", "seed", "generation", "best_so_far", "failed")


def benchmark(strategies: dict, tasks: dict, seeds, generations: int = 32, popsize: int = 10,
              out: str | Path | None = None) -> list[tuple]:
    """Cross product of strategies x tasks x seeds; one row per generation.

    A failed rollout keeps its partial curve; the remaining generations repeat
    the last best-so-far value and are flagged.
    """
    rows = []
    for sname, strat in strategies.items():
        strat = as_strategy(strat)
        for tname, task in tasks.items():
            for s in seeds:
                mean0, sigma0 = holdout_start(s, task.dims)
                res = run_strategy(strat, task, generations, popsize, s, mean0, sigma0)
                curve = list(res.best_so_far)
                fill = curve[-1] if curve else math.inf
                curve += [fill] * (generations - len(curve))
                for g, v in enumerate(curve, start=1):
                    rows.append((sname, tname, s, g, float(v), int(res.failed)))
    if out is not None:
        write_benchmark_csv(rows, out)
    return rows


def write_benchmark_csv(rows, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_HEADER)
    for r in rows:
        w.writerow([r[0], r[1], r[2], r[3], repr(r[4]), r[5]])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue())


def export_attention(params, cfg, task, seed: int, generations: int = 5, popsize: int = 10, context: int = 5,
                     path: str | Path | None = None) -> dict:
    """Run EvoTF on ``task`` and dump the final generation's attention maps.

    Output maps name to ``{"shape": [...], "data": [...]}`` with ``data``
    row-major.
    """
    strategy = EvoTfStrategy(params, cfg, context)
    mean0, sigma0 = holdout_start(seed, task.dims)
    root = rnglib.key(seed)
    state = strategy.init(mean0, sigma0)
    paths = PathState.init(task.dims)
    seq = []
    for g in range(generations):
        X = strategy.ask(state, rnglib.split(root, g), popsize)
        F = np.asarray(task(X), dtype=np.float64)
        feats, paths = featurize(X, F, state.mean, state.sigma, paths)
        seq.append(feats)
        state = strategy.tell(state, X, F)
    maps = attention_maps(stack_features(seq[-context:]), params, cfg)
    doc = {name: {"shape": list(m.shape), "data": np.asarray(m, dtype=np.float64).reshape(-1).tolist()}
           for name, m in maps.items()}
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")
    return doc
