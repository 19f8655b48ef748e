"""Ask/evaluate/tell loops for teachers and for the Evolution Transformer as an ES."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import rng as rnglib
from .features import PathState, featurize, stack_features
from .model import ModelConfig, apply_update, forward
from .teachers import EsState, Strategy

__all__ = [
    "RolloutResult",
    "EvoTfStrategy",
    "evaluate_population",
    "evotf_step",
    "evotf_rollout_batch",
    "init_distribution",
    "run_strategy",
    "task_dims",
]

MEAN_INIT_RANGE = 3.0
SIGMA_INIT_RANGE = (0.25, 2.0)


def init_distribution(key: rnglib.RngKey, dims: int) -> tuple[np.ndarray, np.ndarray]:
    """mean ~ U[-3, 3]^D and one log-uniform scale in [0.25, 2] shared by all dims."""
    mean = rnglib.uniform(rnglib.split(key, 0), dims, -MEAN_INIT_RANGE, MEAN_INIT_RANGE)
    lo, hi = SIGMA_INIT_RANGE
    log_sigma = rnglib.uniform(rnglib.split(key, 1), (), math.log(lo), math.log(hi))
    return mean, np.full(dims, float(np.exp(log_sigma)))


def task_dims(task) -> int:
    try:
        return int(task.dims)
    except AttributeError:
        raise ValueError(f"cannot infer the dimension of task {task!r}") from None


def evaluate_population(task, X: np.ndarray, key: rnglib.RngKey) -> np.ndarray:
    """Fitness of every row of X; stochastic tasks also receive a key."""
    with np.errstate(all="ignore"):
        if getattr(task, "stochastic", False):
            return np.asarray(task(X, key), dtype=np.float64)
        return np.asarray(task(X), dtype=np.float64)


def evotf_step(params, cfg: ModelConfig, X, F, mean, sigma, paths: PathState, window: tuple, context: int,
               lr_mean: float = 1.0, lr_sigma: float = 1.0):
    """Featurize one generation, slide the window, and apply the model's last update.

    Works with any leading batch axes. Returns ``(mean, sigma, paths, window, out)``.
    """
    with np.errstate(all="ignore"):
        feats, paths = featurize(X, F, mean, sigma, paths)
    window = (tuple(window) + (feats,))[-context:]
    with torch.no_grad():
        out = forward(stack_features(list(window)), params, cfg)[..., -1, :, :].numpy().astype(np.float64)
    with np.errstate(all="ignore"):
        mean, sigma = apply_update(mean, sigma, out[..., 0], out[..., 1], lr_mean, lr_sigma)
    return mean, sigma, paths, window, out


class EvoTfStrategy(Strategy):
    """Frozen Evolution Transformer weights used as an evolution strategy.

    Keeps the ``context`` most recent generations' features; the evolution
    paths in the PathState keep accumulating across window evictions.
    """

    name = "evotf"

    def __init__(self, params: dict, config: ModelConfig, context: int = 5, lr_mean: float = 1.0,
                 lr_sigma: float = 1.0):
        if context < 1 or context > config.max_context:
            raise ValueError(f"context window must be in [1, {config.max_context}]")
        self.params = params
        self.config = config
        self.context = context
        self.lr_mean = lr_mean
        self.lr_sigma = lr_sigma

    def _init_aux(self, mean, sigma):
        return {"paths": PathState.init(len(mean)), "window": ()}

    def tell(self, state: EsState, X, F) -> EsState:
        X = np.asarray(X, dtype=np.float64)
        F = np.asarray(F, dtype=np.float64)
        mean, sigma, paths, window, _ = evotf_step(
            self.params, self.config, X, F, state.mean, state.sigma, state.aux["paths"], state.aux["window"],
            self.context, self.lr_mean, self.lr_sigma,
        )
        return replace(state, mean=mean, sigma=sigma, generation=state.generation + 1,
                       aux={"paths": paths, "window": window})


@dataclass
class RolloutResult:
    best_per_gen: np.ndarray
    best_so_far: np.ndarray
    means: np.ndarray  # (G + 1, D), row 0 is the initial mean
    sigmas: np.ndarray
    seed: int
    wall_clock: float = 0.0
    failed: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def final_mean(self) -> np.ndarray:
        return self.means[-1]

    @property
    def final_sigma(self) -> np.ndarray:
        return self.sigmas[-1]

    @property
    def final_best(self) -> float:
        return float(self.best_so_far[-1]) if len(self.best_so_far) else math.inf


def _healthy(mean, sigma) -> bool:
    return bool(np.all(np.isfinite(mean)) and np.all(np.isfinite(sigma)) and np.all(sigma > 0))


def run_strategy(strategy: Strategy, task, generations: int, popsize: int, seed: int,
                 mean0=None, sigma0=None) -> RolloutResult:
    """Run ask -> evaluate -> tell for ``generations`` steps.

    Generation ``g`` samples with key ``split(root, g)`` and evaluates with
    ``split(split(root, "fitness"), g)``. Without an explicit start the mean
    is drawn from U[-3, 3]^D and sigma is 1. A non-finite fitness (or a
    degenerate distribution) ends the run early with ``failed=True``.
    """
    start = time.perf_counter()
    root = rnglib.key(seed)
    d = task_dims(task)
    if mean0 is None:
        mean0 = rnglib.uniform(rnglib.split(root, "init"), d, -MEAN_INIT_RANGE, MEAN_INIT_RANGE)
    if sigma0 is None:
        sigma0 = 1.0
    state = strategy.init(mean0, sigma0)
    fit_key = rnglib.split(root, "fitness")
    best_gen, best_sofar, means, sigmas = [], [], [state.mean.copy()], [state.sigma.copy()]
    failed = False
    best = math.inf
    for g in range(generations):
        X = strategy.ask(state, rnglib.split(root, g), popsize)
        F = evaluate_population(task, X, rnglib.split(fit_key, g))
        if not np.all(np.isfinite(F)):
            failed = True
            break
        best = min(best, float(F.min()))
        best_gen.append(float(F.min()))
        best_sofar.append(best)
        state = strategy.tell(state, X, F)
        means.append(state.mean.copy())
        sigmas.append(state.sigma.copy())
        if not _healthy(state.mean, state.sigma):
            failed = True
            break
    return RolloutResult(
        np.array(best_gen), np.array(best_sofar), np.array(means), np.array(sigmas), seed,
        time.perf_counter() - start, failed,
    )


def evotf_rollout_batch(params, cfg: ModelConfig, tasks: list, mean0: np.ndarray, sigma0: np.ndarray,
                        seeds: list[int], generations: int, popsize: int, context: int = 5,
                        lr_mean: float = 1.0, lr_sigma: float = 1.0) -> dict:
    """EvoTF-as-ES on several same-dimension tasks at once.

    Task ``b`` uses exactly the keys :func:`run_strategy` would use with
    ``seeds[b]``, so each row reproduces a single-task run. Failed rows (non-
    finite fitness or distribution) are frozen at their last healthy state
    and flagged. Returns arrays ``X (B,G,N,D)``, ``F (B,G,N)``,
    ``mean``/``sigma`` ``(B,G+1,D)``, ``best_so_far (B,G)`` and ``failed (B,)``.
    """
    b = len(tasks)
    d = task_dims(tasks[0])
    if any(task_dims(t) != d for t in tasks):
        raise ValueError("batched rollouts need tasks of equal dimension")
    roots = [rnglib.key(s) for s in seeds]
    fit_keys = [rnglib.split(r, "fitness") for r in roots]
    mean = np.array(mean0, dtype=np.float64).reshape(b, d)
    sigma = np.broadcast_to(np.asarray(sigma0, dtype=np.float64), (b, d)).copy()
    paths = PathState.init(d, (b,))
    window: tuple = ()
    Xs = np.zeros((b, generations, popsize, d))
    Fs = np.zeros((b, generations, popsize))
    means = np.zeros((b, generations + 1, d))
    sigmas = np.zeros((b, generations + 1, d))
    best = np.full((b, generations), np.inf)
    failed = np.zeros(b, dtype=bool)
    means[:, 0], sigmas[:, 0] = mean, sigma
    running = np.full(b, np.inf)
    for g in range(generations):
        z = np.stack([rnglib.normal(rnglib.split(r, g), (popsize, d)) for r in roots])
        X = mean[:, None, :] + sigma[:, None, :] * z
        F = np.stack([evaluate_population(t, X[i], rnglib.split(fit_keys[i], g)) for i, t in enumerate(tasks)])
        bad = ~np.all(np.isfinite(F), axis=1) | failed
        failed |= bad
        # keep the batch numerically alive; flagged rows are ignored downstream
        F = np.where(bad[:, None], 0.0, F)
        Xs[:, g], Fs[:, g] = X, F
        running = np.where(bad, running, np.minimum(running, F.min(axis=1)))
        best[:, g] = running
        new_mean, new_sigma, paths, window, _ = evotf_step(
            params, cfg, X, F, mean, sigma, paths, window, context, lr_mean, lr_sigma
        )
        ok = np.all(np.isfinite(new_mean), axis=1) & np.all(np.isfinite(new_sigma), axis=1) & np.all(new_sigma > 0, axis=1)
        failed |= ~ok
        mean = np.where(failed[:, None], mean, new_mean)
        sigma = np.where(failed[:, None], sigma, new_sigma)
        means[:, g + 1], sigmas[:, g + 1] = mean, sigma
    return {"X": Xs, "F": Fs, "mean": means, "sigma": sigmas, "best_so_far": best, "failed": failed}
