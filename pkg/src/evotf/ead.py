"""Evolutionary Algorithm Distillation.

Teacher ES trajectories are generated online on random BBOB tasks and the
model is trained to match every teacher update under the diagonal-Gaussian
KL divergence ``KL(student || teacher)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import rng as rnglib
from .autodiff import adam_init, adam_step, backward, clip_global_norm, cosine_warmup_lr
from .checkpoint import save_checkpoint
from .evaluate import sphere_holdout
from .features import FeatureTensors, PathState, featurize, stack_features
from .metrics import MetricsWriter
from .model import ModelConfig, forward, init_params
from .rollout import EvoTfStrategy, evaluate_population, init_distribution, run_strategy
from .tasks import ControlTask, TaskSpec, sample_task, task_set
from .teachers import Strategy, make_teacher

log = logging.getLogger(__name__)

__all__ = [
    "EadConfig",
    "Trajectory",
    "TrajectoryRejected",
    "generate_teacher_trajectory",
    "trajectory_features",
    "distillation_targets",
    "kl_gaussian_diag",
    "distillation_loss",
    "distill_step",
    "evaluate_holdout",
    "train_ead",
]

MAX_RESAMPLES = 10


@dataclass
class EadConfig:
    teacher: str = "snes"
    tasks: str = "medium"
    dims: int = 5
    popsize: int = 10
    generations: int = 32
    batch: int = 32
    steps: int = 5000
    lr: float = 0.0015
    lr_floor: float = 1e-5
    warmup_frac: float = 0.1
    clip: float = 1.0
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 500
    eval_seeds: int = 8
    eval_context: int = 5
    eval_cartpole: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        for name in ("dims", "popsize", "generations", "batch", "steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.generations > self.model.max_context:
            raise ValueError("trajectory length exceeds the model's context")
        task_set(self.tasks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


@dataclass
class Trajectory:
    """One ES run: ``X[g]``, ``F[g]`` were sampled from ``mean[g]``, ``sigma[g]``
    and the strategy then moved to ``mean[g + 1]``, ``sigma[g + 1]``."""

    task: TaskSpec
    X: np.ndarray  # (G, N, D)
    F: np.ndarray  # (G, N)
    mean: np.ndarray  # (G + 1, D)
    sigma: np.ndarray  # (G + 1, D)
    seed: int
    tag: str
    resamples: int = 0

    @property
    def generations(self) -> int:
        return self.F.shape[0]

    @property
    def final_best(self) -> float:
        return float(self.F.min())


class TrajectoryRejected(RuntimeError):
    pass


def _rollout_teacher(teacher: Strategy, task, key, generations, popsize):
    mean0, sigma0 = init_distribution(rnglib.split(key, "init"), task.dims)
    state = teacher.init(mean0, sigma0)
    fit_key = rnglib.split(key, "fitness")
    Xs, Fs, means, sigmas = [], [], [state.mean], [state.sigma]
    for g in range(generations):
        X = teacher.ask(state, rnglib.split(key, g), popsize)
        F = evaluate_population(task, X, rnglib.split(fit_key, g))
        if not np.all(np.isfinite(F)):
            return None
        state = teacher.tell(state, X, F)
        if not (np.all(np.isfinite(state.mean)) and np.all(state.sigma > 0) and np.all(np.isfinite(state.sigma))):
            return None
        Xs.append(X)
        Fs.append(F)
        means.append(state.mean)
        sigmas.append(state.sigma)
    return np.array(Xs), np.array(Fs), np.array(means), np.array(sigmas)


def generate_teacher_trajectory(teacher: Strategy, task: TaskSpec, cfg: EadConfig, key: rnglib.RngKey) -> Trajectory:
    """Run the teacher from a random start; resample on non-finite values."""
    if task.dims != cfg.dims:
        raise ValueError(f"task has {task.dims} dims, config expects {cfg.dims}")
    for attempt in range(MAX_RESAMPLES):
        k = key if attempt == 0 else rnglib.split(key, f"retry{attempt}")
        result = _rollout_teacher(teacher, task, k, cfg.generations, cfg.popsize)
        if result is not None:
            X, F, mean, sigma = result
            return Trajectory(task, X, F, mean, sigma, rnglib.seed_of(k), teacher.name, attempt)
        log.warning("non-finite teacher trajectory on %s, resampling", task.function_id)
    raise TrajectoryRejected(f"{MAX_RESAMPLES} consecutive non-finite trajectories on {task.function_id}")


def trajectory_features(trajs: list[Trajectory]) -> FeatureTensors:
    """Features ``(B, G, ...)`` recomputed from the recorded data."""
    X = np.stack([t.X for t in trajs])
    F = np.stack([t.F for t in trajs])
    mean = np.stack([t.mean for t in trajs])
    sigma = np.stack([t.sigma for t in trajs])
    paths = PathState.init(X.shape[-1], (len(trajs),))
    seq = []
    for g in range(X.shape[1]):
        feats, paths = featurize(X[:, g], F[:, g], mean[:, g], sigma[:, g], paths)
        seq.append(feats)
    return stack_features(seq)


def distillation_targets(trajs: list[Trajectory]) -> tuple[np.ndarray, np.ndarray]:
    """Teacher moves in units of the current scale.

    ``shift = (mean' - mean) / sigma`` and ``ratio = sigma / sigma'``, both
    ``(B, G, D)``; the KL only ever needs these.
    """
    mean = np.stack([t.mean for t in trajs])
    sigma = np.stack([t.sigma for t in trajs])
    shift = (mean[:, 1:] - mean[:, :-1]) / sigma[:, :-1]
    ratio = sigma[:, :-1] / sigma[:, 1:]
    return shift, ratio


def kl_gaussian_diag(mean_e, sigma_e, mean_t, sigma_t):
    """KL(N(mean_e, diag sigma_e^2) || N(mean_t, diag sigma_t^2)), summed over the last axis."""
    tensors = [torch.as_tensor(v, dtype=torch.float64) if not isinstance(v, torch.Tensor) else v
               for v in (mean_e, sigma_e, mean_t, sigma_t)]
    mean_e, sigma_e, mean_t, sigma_t = tensors
    if bool((sigma_e <= 0).any()) or bool((sigma_t <= 0).any()):
        raise ValueError("kl_gaussian_diag needs strictly positive scales")
    ratio = sigma_e / sigma_t
    quad = ((mean_t - mean_e) / sigma_t) ** 2
    return 0.5 * torch.sum(ratio**2 - 2.0 * torch.log(ratio) + quad - 1.0, dim=-1)


def distillation_loss(out: torch.Tensor, shift, ratio) -> torch.Tensor:
    """Mean over batch and generations of the per-generation KL (summed over dims).

    ``out[..., 0]`` / ``out[..., 1]`` are the model's mean / log-scale updates
    with unit learning rates; ``shift``/``ratio`` come from
    :func:`distillation_targets`.
    """
    shift = torch.as_tensor(np.asarray(shift), dtype=out.dtype)
    ratio = torch.as_tensor(np.asarray(ratio), dtype=out.dtype)
    o_mean, o_sigma = out[..., 0], out[..., 1]
    # sigma_e / sigma_t = ratio * exp(o_sigma);  (mean_t - mean_e) / sigma_t = ratio * (shift - o_mean)
    log_r = torch.log(ratio) + o_sigma
    kl = 0.5 * torch.sum(torch.exp(2.0 * log_r) - 2.0 * log_r + (ratio * (shift - o_mean)) ** 2 - 1.0, dim=-1)
    return kl.mean()


def distill_step(params: dict, adam, feats: FeatureTensors, shift, ratio, cfg: ModelConfig, lr: float, clip: float):
    """One clipped Adam step on the distillation loss.

    Returns ``(params, adam, loss, grad_norm)``; on a non-finite loss the
    inputs come back unchanged with ``grad_norm = nan``.
    """
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    out = forward(feats, leaves, cfg)
    loss = distillation_loss(out, shift, ratio)
    value = float(loss.detach())
    if not math.isfinite(value):
        return params, adam, value, math.nan
    grads = dict(zip(leaves, backward(loss, list(leaves.values()))))
    grads, norm = clip_global_norm(grads, clip)
    if not math.isfinite(norm):
        return params, adam, value, norm
    new_params, adam = adam_step(params, grads, adam, lr)
    return new_params, adam, value, norm


def evaluate_holdout(params, model_cfg: ModelConfig, seeds: list[int], dims=5, popsize=10, generations=32,
                     context=5, cartpole=False) -> dict:
    """Median final best-so-far fitness on held-out Sphere tasks (and CartPole)."""
    strategy = EvoTfStrategy(params, model_cfg, context)
    out = {"eval_sphere": float(np.median(sphere_holdout(strategy, seeds, dims, popsize, generations)))}
    if cartpole:
        task = ControlTask("cartpole", seed=seeds[0])
        res = run_strategy(strategy, task, generations, popsize, seeds[0], np.zeros(task.dims), 0.1)
        out["eval_cartpole"] = res.final_best
    return out


def train_ead(cfg: EadConfig, out_dir: str | Path | None = None, metrics: MetricsWriter | None = None):
    """Distill ``cfg.teacher`` into a fresh model. Returns ``(params, metrics_records)``."""
    out_dir = Path(out_dir) if out_dir is not None else None
    own_metrics = metrics is None
    if metrics is None:
        metrics = MetricsWriter(out_dir / "metrics.jsonl" if out_dir else None)
    root = rnglib.key(cfg.seed)
    teacher = make_teacher(cfg.teacher)
    tasks = task_set(cfg.tasks)
    params = init_params(cfg.model, rnglib.split(root, "init"))
    adam = adam_init(params)
    warmup = max(1, int(cfg.warmup_frac * cfg.steps))
    if warmup >= cfg.steps:
        warmup = max(cfg.steps - 1, 0)
    eval_seeds = [10_000_000 + cfg.seed * 1000 + i for i in range(cfg.eval_seeds)]
    step_root = rnglib.split(root, "step")
    for step in range(1, cfg.steps + 1):
        step_key = rnglib.split(step_root, step)
        trajs = []
        for b in range(cfg.batch):
            bkey = rnglib.split(step_key, b)
            task = sample_task(tasks, cfg.dims, rnglib.split(bkey, "task"))
            trajs.append(generate_teacher_trajectory(teacher, task, cfg, bkey))
        feats = trajectory_features(trajs)
        shift, ratio = distillation_targets(trajs)
        lr = cosine_warmup_lr(step, warmup, cfg.steps, cfg.lr, cfg.lr_floor) if cfg.steps > 1 else cfg.lr
        params, adam, loss, norm = distill_step(params, adam, feats, shift, ratio, cfg.model, lr, cfg.clip)
        skipped = not (math.isfinite(loss) and math.isfinite(norm))
        if skipped:
            log.warning("step %d: non-finite loss or gradient, update skipped", step)
        metrics.write(event="train", step=step, loss=loss, lr=lr, grad_norm=norm, skipped=skipped,
                      resamples=sum(t.resamples for t in trajs))
        if cfg.eval_every and step % cfg.eval_every == 0:
            scores = evaluate_holdout(params, cfg.model, eval_seeds, cfg.dims, cfg.popsize, cfg.generations,
                                      cfg.eval_context, cfg.eval_cartpole)
            metrics.write(event="eval", step=step, **scores)
        if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(params, cfg.model, out_dir / f"ckpt_{step:06d}", {"step": step, "trainer": "ead"})
    if out_dir is not None:
        save_checkpoint(params, cfg.model, out_dir / "final",
                        {"step": cfg.steps, "trainer": "ead", "teacher": cfg.teacher, "config": cfg.to_dict()})
    if own_metrics:
        metrics.close()
    return params, metrics.records
