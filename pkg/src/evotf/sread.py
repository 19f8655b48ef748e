"""Self-referential distillation.

Each iteration perturbs the current weights into offspring, lets every
offspring optimize the same freshly sampled tasks, keeps the best trajectory
per task and takes one distillation step towards the kept trajectories'
own updates. No teacher and no meta-optimizer are involved.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import rng as rnglib
from .autodiff import adam_init
from .checkpoint import load_checkpoint, save_checkpoint
from .ead import Trajectory, distill_step, distillation_targets, trajectory_features
from .metrics import MetricsWriter
from .model import ModelConfig, init_params
from .rollout import evotf_rollout_batch, init_distribution
from .tasks import TaskSpec, OFFSET_RANGE, task_set

log = logging.getLogger(__name__)

__all__ = [
    "SreadConfig",
    "TrajectoryBuffer",
    "perturb",
    "perturbation_scale",
    "offspring_params",
    "sample_iteration_tasks",
    "generate_and_filter",
    "train_sread",
]


@dataclass
class SreadConfig:
    offspring: int = 64
    sigma0: float = 0.004
    decay: float = 0.99999
    tasks: str = "medium"
    buffer_size: int = 32
    iterations: int = 1000
    dims: int = 5
    popsize: int = 10
    generations: int = 32
    context: int = 5
    lr: float = 0.0015
    clip: float = 1.0
    init: str = "random"  # or a checkpoint directory
    checkpoint_every: int = 500
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        for name in ("offspring", "buffer_size", "iterations", "dims", "popsize", "generations", "context"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        task_set(self.tasks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


class TrajectoryBuffer:
    """FIFO of trajectories; the oldest is evicted first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("buffer capacity must be positive")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def push(self, traj: Trajectory) -> None:
        self._items.append(traj)

    def extend(self, trajs) -> None:
        for t in trajs:
            self.push(t)

    def contents(self) -> list[Trajectory]:
        return list(self._items)

    def __len__(self) -> int:
        return len(self._items)


def perturbation_scale(cfg: SreadConfig, iteration: int) -> float:
    """sigma_p used at ``iteration`` (1-based): ``sigma0 * decay ** iteration``."""
    return cfg.sigma0 * cfg.decay**iteration


def perturb(params: dict, sigma_p: float, key: rnglib.RngKey) -> dict:
    """theta + sigma_p * eps with eps i.i.d. standard normal per scalar."""
    if not sigma_p > 0:
        raise ValueError("perturbation scale must be positive")
    out = {}
    for name in sorted(params):
        t = params[name]
        eps = rnglib.normal(rnglib.split(key, name), tuple(t.shape))
        out[name] = (t.double() + sigma_p * torch.from_numpy(eps)).to(t.dtype)
    return out


def offspring_params(params: dict, sigma_p: float, iter_key: rnglib.RngKey, index: int) -> dict:
    return perturb(params, sigma_p, rnglib.split(rnglib.split(iter_key, "offspring"), index))


def sample_iteration_tasks(cfg: SreadConfig, iter_key: rnglib.RngKey):
    """One task per family of the set, plus starts and rollout seeds shared by all offspring."""
    specs, means, sigmas, seeds = [], [], [], []
    for fid in task_set(cfg.tasks).members:
        k = rnglib.split(rnglib.split(iter_key, "task"), fid)
        offset = rnglib.uniform(rnglib.split(k, "offset"), cfg.dims, -OFFSET_RANGE, OFFSET_RANGE)
        specs.append(TaskSpec(fid, cfg.dims, tuple(float(v) for v in offset)))
        m, s = init_distribution(rnglib.split(k, "init"), cfg.dims)
        means.append(m)
        sigmas.append(s)
        seeds.append(rnglib.seed_of(rnglib.split(k, "rollout")))
    return specs, np.array(means), np.array(sigmas), seeds


def generate_and_filter(params: dict, cfg: SreadConfig, sigma_p: float, iter_key: rnglib.RngKey):
    """Returns ``(kept, stats)``.

    ``kept`` holds at most one trajectory per task family: the offspring with
    the lowest final best-so-far (ties go to the lower offspring index).
    ``stats`` maps function id to ``(best, median)`` final fitness over the
    offspring that finished, or ``None`` when all of them failed.
    """
    specs, m0, s0, seeds = sample_iteration_tasks(cfg, iter_key)
    finals = np.full((cfg.offspring, len(specs)), np.inf)
    runs = []
    for i in range(cfg.offspring):
        child = offspring_params(params, sigma_p, iter_key, i)
        res = evotf_rollout_batch(child, cfg.model, specs, m0, s0, seeds, cfg.generations, cfg.popsize,
                                  cfg.context)
        ok = ~res["failed"] & np.isfinite(res["best_so_far"][:, -1])
        finals[i] = np.where(ok, res["best_so_far"][:, -1], np.inf)
        runs.append(res)
    kept, stats = [], {}
    for j, spec in enumerate(specs):
        col = finals[:, j]
        if not np.isfinite(col).any():
            log.warning("all offspring failed on %s; task skipped", spec.function_id)
            stats[spec.function_id] = None
            continue
        i = int(np.argmin(col))
        r = runs[i]
        kept.append(Trajectory(spec, r["X"][j], r["F"][j], r["mean"][j], r["sigma"][j], seeds[j],
                               f"offspring-{i}"))
        finite = col[np.isfinite(col)]
        stats[spec.function_id] = (float(col[i]), float(np.median(finite)))
    return kept, stats


def _initial_params(cfg: SreadConfig) -> dict:
    if cfg.init == "random":
        return init_params(cfg.model, rnglib.split(rnglib.key(cfg.seed), "init"))
    params, ckpt_cfg, _ = load_checkpoint(cfg.init)
    if ckpt_cfg != cfg.model:
        raise ValueError("checkpoint model config does not match the configured model")
    return params


def train_sread(cfg: SreadConfig, out_dir: str | Path | None = None, metrics: MetricsWriter | None = None):
    """Returns ``(params, metrics records)``."""
    out_dir = Path(out_dir) if out_dir is not None else None
    own_metrics = metrics is None
    if metrics is None:
        metrics = MetricsWriter(out_dir / "metrics.jsonl" if out_dir else None)
    root = rnglib.key(cfg.seed)
    params = _initial_params(cfg)
    adam = adam_init(params)
    buffer = TrajectoryBuffer(cfg.buffer_size)
    it_root = rnglib.split(root, "iteration")
    for it in range(1, cfg.iterations + 1):
        sigma_p = perturbation_scale(cfg, it)
        kept, stats = generate_and_filter(params, cfg, sigma_p, rnglib.split(it_root, it))
        buffer.extend(kept)
        loss, norm = math.nan, math.nan
        if len(buffer):
            trajs = buffer.contents()
            shift, ratio = distillation_targets(trajs)
            params, adam, loss, norm = distill_step(params, adam, trajectory_features(trajs), shift, ratio,
                                                    cfg.model, cfg.lr, cfg.clip)
        skipped = not (math.isfinite(loss) and math.isfinite(norm))
        if skipped:
            log.warning("iteration %d: non-finite loss or gradient, update skipped", it)
        metrics.write(
            event="sread", iteration=it, sigma_p=sigma_p, loss=loss, grad_norm=norm, skipped=skipped,
            buffer=len(buffer),
            best={k: (v[0] if v else None) for k, v in stats.items()},
            median={k: (v[1] if v else None) for k, v in stats.items()},
        )
        if out_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            save_checkpoint(params, cfg.model, out_dir / f"ckpt_{it:06d}", {"iteration": it, "trainer": "sread"})
    if out_dir is not None:
        save_checkpoint(params, cfg.model, out_dir / "final",
                        {"iteration": cfg.iterations, "trainer": "sread", "config": cfg.to_dict()})
    if own_metrics:
        metrics.close()
    return params, metrics.records
