"""Meta-evolution of model weights.

Sep-CMA-ES searches the flat parameter vector; each candidate is scored by
running the model as an ES on a batch of BBOB tasks, and per-task z-scores
averaged over tasks form the (minimized) meta-fitness.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rnglib
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import MetricsWriter
from .model import ModelConfig, flatten_params, init_params, param_count, unflatten_params
from .rollout import evotf_rollout_batch, init_distribution
from .tasks import TaskSpec, sample_task, task_set
from .teachers import SepCMAES

log = logging.getLogger(__name__)

__all__ = [
    "MetaConfig",
    "candidate_fitness",
    "penalize_nonfinite",
    "znorm_meta_fitness",
    "initial_meta_mean",
    "sample_meta_tasks",
    "train_meta",
]


@dataclass
class MetaConfig:
    meta_pop: int = 256
    meta_generations: int = 1000
    task_batch: int = 64
    meta_sigma_init: float = 0.005
    init: str = "random"  # or a checkpoint directory
    tasks: str = "medium"
    dims: int = 5
    popsize: int = 10
    generations: int = 32
    context: int = 5
    probe_tasks: int = 8
    checkpoint_every: int = 100
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig.reduced)

    def __post_init__(self):
        if self.meta_pop < 2:
            raise ValueError("meta_pop must be at least 2")
        for name in ("meta_generations", "task_batch", "dims", "popsize", "generations", "context"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.meta_sigma_init > 0:
            raise ValueError("meta_sigma_init must be positive")
        task_set(self.tasks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


def sample_meta_tasks(cfg: MetaConfig, key: rnglib.RngKey, count: int, tasks=None):
    """``count`` tasks with their start distributions and rollout seeds."""
    specs, means, sigmas, seeds = [], [], [], []
    for i in range(count):
        k = rnglib.split(key, i)
        specs.append(sample_task(tasks or cfg.tasks, cfg.dims, rnglib.split(k, "task")))
        m, s = init_distribution(rnglib.split(k, "init"), cfg.dims)
        means.append(m)
        sigmas.append(s)
        seeds.append(rnglib.seed_of(rnglib.split(k, "rollout")))
    return specs, np.array(means), np.array(sigmas), seeds


def candidate_fitness(theta, tasks: list[TaskSpec], cfg: MetaConfig, mean0, sigma0, seeds) -> np.ndarray:
    """Final best-so-far per task for one flat parameter vector; nan marks a failed rollout."""
    if np.shape(theta) != (param_count(cfg.model),):
        raise ValueError(f"theta has shape {np.shape(theta)}, expected ({param_count(cfg.model)},)")
    params = unflatten_params(theta, cfg.model)
    res = evotf_rollout_batch(params, cfg.model, tasks, mean0, sigma0, seeds, cfg.generations, cfg.popsize,
                              cfg.context)
    scores = res["best_so_far"][:, -1].copy()
    scores[res["failed"] | ~np.isfinite(scores)] = np.nan
    return scores


def penalize_nonfinite(scores: np.ndarray) -> np.ndarray:
    """Replace non-finite entries by the worst finite score in the population."""
    scores = np.array(scores, dtype=np.float64)
    bad = ~np.isfinite(scores)
    if bad.any():
        finite = scores[~bad]
        scores[bad] = finite.max() if finite.size else 0.0
    return scores


def znorm_meta_fitness(scores) -> np.ndarray:
    """Column-wise z-score across the population, then the mean over tasks (lower is better)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 2:
        raise ValueError("scores must be (meta_pop >= 2, tasks)")
    z = (scores - scores.mean(axis=0)) / (scores.std(axis=0) + 1e-10)
    return z.mean(axis=1)


def initial_meta_mean(cfg: MetaConfig) -> np.ndarray:
    if cfg.init == "random":
        params = init_params(cfg.model, rnglib.split(rnglib.key(cfg.seed), "init"))
        return flatten_params(params, cfg.model).astype(np.float64)
    params, ckpt_cfg, _ = load_checkpoint(cfg.init)
    if ckpt_cfg != cfg.model:
        raise ValueError("checkpoint model config does not match the meta-evolution config")
    return flatten_params(params, ckpt_cfg).astype(np.float64)


def train_meta(cfg: MetaConfig, out_dir: str | Path | None = None, metrics: MetricsWriter | None = None):
    """Returns ``(params of the final meta-mean, metrics records)``.

    Besides the z-scored meta-fitness, every candidate is also scored on a
    fixed set of Sphere probe tasks; ``probe_median`` is comparable across
    meta-generations whereas z-scores are not.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    own_metrics = metrics is None
    if metrics is None:
        metrics = MetricsWriter(out_dir / "metrics.jsonl" if out_dir else None)
    root = rnglib.key(cfg.seed)
    es = SepCMAES()
    state = es.init(initial_meta_mean(cfg), cfg.meta_sigma_init)
    if out_dir is not None:
        save_checkpoint(unflatten_params(state.mean, cfg.model), cfg.model, out_dir / "ckpt_000000",
                        {"meta_generation": 0, "trainer": "meta"})
    probe = sample_meta_tasks(cfg, rnglib.split(root, "probe"), cfg.probe_tasks, tasks="small")
    gen_root = rnglib.split(root, "meta")
    for mg in range(1, cfg.meta_generations + 1):
        gkey = rnglib.split(gen_root, mg)
        specs, m0, s0, seeds = sample_meta_tasks(cfg, rnglib.split(gkey, "tasks"), cfg.task_batch)
        thetas = es.ask(state, rnglib.split(gkey, "ask"), cfg.meta_pop)
        raw = np.stack([candidate_fitness(t, specs, cfg, m0, s0, seeds) for t in thetas])
        failed = int((~np.isfinite(raw)).sum())
        scores = penalize_nonfinite(raw)
        fitness = znorm_meta_fitness(scores)
        probe_scores = penalize_nonfinite(np.stack([candidate_fitness(t, probe[0], cfg, *probe[1:]) for t in thetas]))
        probe_cand = probe_scores.mean(axis=1)
        try:
            state = es.tell(state, thetas, fitness)
        except FloatingPointError as exc:
            raise FloatingPointError(f"meta-ES failed at meta-generation {mg}: {exc}") from exc
        metrics.write(
            event="meta", meta_gen=mg, best=float(fitness.min()), median=float(np.median(fitness)),
            probe_median=float(np.median(probe_cand)), probe_best=float(probe_cand.min()),
            raw_median=float(np.median(scores.mean(axis=1))), meta_sigma=float(np.mean(state.sigma)),
            failed_rollouts=failed,
        )
        if out_dir is not None and cfg.checkpoint_every and mg % cfg.checkpoint_every == 0:
            save_checkpoint(unflatten_params(state.mean, cfg.model), cfg.model, out_dir / f"ckpt_{mg:06d}",
                            {"meta_generation": mg, "trainer": "meta"})
    params = unflatten_params(state.mean, cfg.model)
    if out_dir is not None:
        save_checkpoint(params, cfg.model, out_dir / "final",
                        {"meta_generation": cfg.meta_generations, "trainer": "meta", "config": cfg.to_dict()})
    if own_metrics:
        metrics.close()
    return params, metrics.records
