"""Per-generation input features for the Evolution Transformer.

All functions accept arbitrary leading batch axes: ``X`` is ``(..., N, D)``,
``F`` is ``(..., N)``, ``mean``/``sigma`` are ``(..., D)``. The
across-generation recurrences (evolution paths, best-so-far) live in an
explicit :class:`PathState` threaded by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .teachers import centered_rank, ranks, snes_utilities

__all__ = [
    "TIMESCALES",
    "SOLUTION_DIM",
    "FITNESS_DIM",
    "DISTRIBUTION_DIM",
    "PathState",
    "FeatureTensors",
    "solution_features",
    "fitness_features",
    "distribution_features",
    "featurize",
    "stack_features",
]

TIMESCALES = (0.1, 0.5, 0.9)
SOLUTION_DIM = 5
FITNESS_DIM = 6
DISTRIBUTION_DIM = 3 + 2 * len(TIMESCALES) + 1
_CLIP = 5.0


@dataclass(frozen=True)
class PathState:
    mean_paths: np.ndarray  # (..., len(TIMESCALES), D)
    sigma_paths: np.ndarray  # (..., len(TIMESCALES), D)
    best_x: np.ndarray  # (..., D)
    best_f: np.ndarray  # (...)
    generation: int = 0

    @classmethod
    def init(cls, dims: int, batch_shape: tuple[int, ...] = ()) -> "PathState":
        paths = np.zeros(batch_shape + (len(TIMESCALES), dims))
        return cls(paths, paths.copy(), np.zeros(batch_shape + (dims,)), np.full(batch_shape, np.inf), 0)


@dataclass(frozen=True)
class FeatureTensors:
    solution: np.ndarray  # (..., N, D, SOLUTION_DIM)
    fitness: np.ndarray  # (..., N, FITNESS_DIM)
    distribution: np.ndarray  # (..., D, DISTRIBUTION_DIM)


def _take_best(X, F):
    i = np.argmin(F, axis=-1)
    return np.take_along_axis(X, i[..., None, None], axis=-2)[..., 0, :]


def _best_so_far(X, F, paths: PathState):
    gen_best = _take_best(X, F)
    improved = F.min(axis=-1) < paths.best_f
    best_x = np.where(improved[..., None], gen_best, paths.best_x)
    best_f = np.where(improved, F.min(axis=-1), paths.best_f)
    return gen_best, best_x, best_f


def solution_features(X, F, mean, sigma, paths: PathState) -> np.ndarray:
    """Per (member, dim): [s, s^2, (x - gen best)/sigma, (x - best so far)/sigma, clip(s)].

    ``s = (x - mean) / sigma``; the best-so-far solution includes this generation.
    """
    X = np.asarray(X, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    sig = sigma[..., None, :]
    s = (X - mean[..., None, :]) / sig
    gen_best, best_x, _ = _best_so_far(X, F, paths)
    return np.stack(
        [
            s,
            s * s,
            (X - gen_best[..., None, :]) / sig,
            (X - best_x[..., None, :]) / sig,
            np.clip(s, -_CLIP, _CLIP),
        ],
        axis=-1,
    )


def _zscore(F):
    return (F - F.mean(axis=-1, keepdims=True)) / (F.std(axis=-1, keepdims=True) + 1e-10)


def fitness_features(F, paths: PathState) -> np.ndarray:
    """Per member: [improved, z-score, centered rank, range-normalized, SNES utility, is-argmin]."""
    F = np.asarray(F, dtype=np.float64)
    n = F.shape[-1]
    lo = F.min(axis=-1, keepdims=True)
    hi = F.max(axis=-1, keepdims=True)
    argmin = np.argmin(F, axis=-1)
    is_best = (np.arange(n) == argmin[..., None]).astype(np.float64)
    return np.stack(
        [
            (F < paths.best_f[..., None]).astype(np.float64),
            _zscore(F),
            centered_rank(F),
            (F - lo) / (hi - lo + 1e-10) - 0.5,
            snes_utilities(n)[ranks(F)],
            is_best,
        ],
        axis=-1,
    )


def distribution_features(X, F, mean, sigma, paths: PathState) -> tuple[np.ndarray, PathState]:
    """Per dim: [fd-grad, SNES mean-grad, SNES sigma-grad, mean paths, sigma paths, centered log sigma].

    Path channels report the state *before* this generation; the returned
    PathState has them advanced by ``p <- (1 - c) p + c g``.
    """
    X = np.asarray(X, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    n = F.shape[-1]
    s = (X - mean[..., None, :]) / sigma[..., None, :]
    fd_grad = np.einsum("...n,...nd->...d", centered_rank(F), s) / n
    u = snes_utilities(n)[ranks(F)]
    g_mean = np.einsum("...n,...nd->...d", u, s)
    g_sigma = np.einsum("...n,...nd->...d", u, s * s - 1.0)
    log_sigma = np.log(sigma)
    log_sigma = log_sigma - log_sigma.mean(axis=-1, keepdims=True)

    # (..., C, D) -> (..., D, C)
    mp = np.swapaxes(paths.mean_paths, -1, -2)
    sp = np.swapaxes(paths.sigma_paths, -1, -2)
    feats = np.concatenate(
        [fd_grad[..., None], g_mean[..., None], g_sigma[..., None], mp, sp, log_sigma[..., None]], axis=-1
    )

    c = np.asarray(TIMESCALES)[:, None]
    _, best_x, best_f = _best_so_far(X, F, paths)
    new_paths = PathState(
        mean_paths=(1 - c) * paths.mean_paths + c * g_mean[..., None, :],
        sigma_paths=(1 - c) * paths.sigma_paths + c * g_sigma[..., None, :],
        best_x=best_x,
        best_f=best_f,
        generation=paths.generation + 1,
    )
    return feats, new_paths


def featurize(X, F, mean, sigma, paths: PathState) -> tuple[FeatureTensors, PathState]:
    """All three feature tensors for one generation plus the advanced PathState."""
    mean = np.asarray(mean, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    sol = solution_features(X, F, mean, sigma, paths)
    fit = fitness_features(F, paths)
    dist, new_paths = distribution_features(X, F, mean, sigma, paths)
    return FeatureTensors(sol, fit, dist), new_paths


def stack_features(seq: list[FeatureTensors]) -> FeatureTensors:
    """Stack per-generation features along a new generation axis.

    The generation axis lands just before the per-generation axes, so batched
    inputs ``(B, N, D, C)`` become ``(B, G, N, D, C)``.
    """
    return FeatureTensors(
        np.stack([f.solution for f in seq], axis=-4),
        np.stack([f.fitness for f in seq], axis=-3),
        np.stack([f.distribution for f in seq], axis=-3),
    )
