"""Diagonal-Gaussian evolution strategies behind one ask/tell interface.

``ask`` draws ``x_i = mean + sigma * z_i``; ``tell`` consumes fitness (lower
is better) and returns a fresh state. ``tell`` never touches randomness and
``ask`` never sees fitness, so recorded trajectories can be replayed exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rnglib

__all__ = [
    "EsState",
    "Strategy",
    "SNES",
    "SepCMAES",
    "OpenES",
    "HillClimb",
    "RandomSearch",
    "TEACHERS",
    "make_teacher",
    "centered_rank",
    "ranks",
    "snes_utilities",
]


def ranks(F: np.ndarray) -> np.ndarray:
    """0-based ascending ranks along the last axis; ties go to the lower index."""
    order = np.argsort(F, axis=-1, kind="stable")
    out = np.empty_like(order)
    np.put_along_axis(out, order, np.arange(F.shape[-1]), axis=-1)
    return out


def centered_rank(F) -> np.ndarray:
    """Ranks mapped to [-0.5, 0.5]; the lowest fitness gets -0.5."""
    F = np.asarray(F, dtype=np.float64)
    n = F.shape[-1]
    if n < 2:
        raise ValueError("centered_rank needs at least two fitness values")
    return ranks(F) / (n - 1) - 0.5


def snes_utilities(n: int) -> np.ndarray:
    """Zero-sum log-rank utilities indexed by rank (index 0 = best)."""
    if n < 2:
        raise ValueError("snes_utilities needs n >= 2")
    raw = np.maximum(0.0, math.log(n / 2 + 1) - np.log(np.arange(1, n + 1)))
    return raw / raw.sum() - 1.0 / n


@dataclass(frozen=True)
class EsState:
    mean: np.ndarray
    sigma: np.ndarray
    generation: int = 0
    aux: dict = field(default_factory=dict)


def _check(state: EsState, X, F):
    X = np.asarray(X, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != state.mean.shape[0] or F.shape != (X.shape[0],):
        raise ValueError(f"tell: X {X.shape} / F {F.shape} do not match dimension {state.mean.shape[0]}")
    return X, F


class Strategy:
    name = "strategy"
    antithetic = False

    def init(self, mean, sigma) -> EsState:
        mean = np.array(mean, dtype=np.float64)
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), mean.shape).copy()
        if np.any(sigma <= 0):
            raise ValueError("initial sigma must be strictly positive")
        return EsState(mean, sigma, 0, self._init_aux(mean, sigma))

    def _init_aux(self, mean, sigma) -> dict:
        return {}

    def ask(self, state: EsState, key: rnglib.RngKey, n: int) -> np.ndarray:
        if n < 2:
            raise ValueError("population size must be at least 2")
        shape = (n, state.mean.shape[0])
        if self.antithetic:
            z = rnglib.normal_antithetic(key, shape)
        else:
            z = rnglib.normal(key, shape)
        return state.mean + state.sigma * z

    def tell(self, state: EsState, X, F) -> EsState:
        raise NotImplementedError


class RandomSearch(Strategy):
    """Identity update: the search distribution never moves."""

    name = "random"

    def tell(self, state, X, F):
        _check(state, X, F)
        return replace(state, generation=state.generation + 1)


class SNES(Strategy):
    name = "snes"

    def __init__(self, lr_mean: float = 1.0, lr_sigma: float | None = None):
        self.lr_mean = lr_mean
        self.lr_sigma = lr_sigma

    def sigma_rate(self, d: int) -> float:
        if self.lr_sigma is not None:
            return self.lr_sigma
        return (3 + math.log(d)) / (5 * math.sqrt(d))

    def tell(self, state, X, F):
        X, F = _check(state, X, F)
        s = (X - state.mean) / state.sigma
        u = snes_utilities(len(F))[ranks(F)]
        grad_mean = u @ s
        grad_sigma = u @ (s * s - 1.0)
        mean = state.mean + self.lr_mean * state.sigma * grad_mean
        sigma = state.sigma * np.exp(0.5 * self.sigma_rate(len(state.mean)) * grad_sigma)
        return replace(state, mean=mean, sigma=sigma, generation=state.generation + 1)


class SepCMAES(Strategy):
    """Separable CMA-ES: diagonal covariance, cumulative step-size adaptation.

    ``sigma`` exposed in the state is ``step * sqrt(diag C)``.
    """

    name = "sepcmaes"

    def _init_aux(self, mean, sigma):
        d = len(mean)
        return {"step": 1.0, "C": sigma * sigma, "p_sigma": np.zeros(d), "p_c": np.zeros(d)}

    @staticmethod
    def constants(n: int, d: int) -> dict:
        mu = n // 2
        w = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
        w = w / w.sum()
        mu_eff = 1.0 / np.sum(w * w)
        c_sigma = (mu_eff + 2.0) / (d + mu_eff + 5.0)
        d_sigma = 1.0 + 2.0 * max(0.0, math.sqrt((mu_eff - 1.0) / (d + 1.0)) - 1.0) + c_sigma
        c_c = (4.0 + mu_eff / d) / (d + 4.0 + 2.0 * mu_eff / d)
        sep = (d + 2.0) / 3.0
        c_1 = min(1.0, sep * 2.0 / ((d + 1.3) ** 2 + mu_eff))
        c_mu = min(1.0 - c_1, sep * 2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((d + 2.0) ** 2 + mu_eff))
        chi_n = math.sqrt(d) * (1.0 - 1.0 / (4.0 * d) + 1.0 / (21.0 * d * d))
        return dict(mu=mu, weights=w, mu_eff=mu_eff, c_sigma=c_sigma, d_sigma=d_sigma,
                    c_c=c_c, c_1=c_1, c_mu=c_mu, chi_n=chi_n)

    def tell(self, state, X, F):
        X, F = _check(state, X, F)
        d = len(state.mean)
        k = self.constants(len(F), d)
        aux = state.aux
        step, C = aux["step"], aux["C"]
        order = np.argsort(F, kind="stable")[: k["mu"]]
        y = (X[order] - state.mean) / step
        y_w = k["weights"] @ y
        mean = state.mean + step * y_w

        sqrt_c = np.sqrt(C)
        cs, cc = k["c_sigma"], k["c_c"]
        p_sigma = (1 - cs) * aux["p_sigma"] + math.sqrt(cs * (2 - cs) * k["mu_eff"]) * y_w / sqrt_c
        norm_ps = float(np.linalg.norm(p_sigma))
        g = state.generation + 1
        h_sigma = float(norm_ps / math.sqrt(1 - (1 - cs) ** (2 * g)) < (1.4 + 2.0 / (d + 1)) * k["chi_n"])
        p_c = (1 - cc) * aux["p_c"] + h_sigma * math.sqrt(cc * (2 - cc) * k["mu_eff"]) * y_w

        c1, cmu = k["c_1"], k["c_mu"]
        rank_mu = k["weights"] @ (y * y)
        C = (1 - c1 - cmu) * C + c1 * (p_c * p_c + (1 - h_sigma) * cc * (2 - cc) * C) + cmu * rank_mu
        if np.any(~(C > 0)):
            raise FloatingPointError("Sep-CMA-ES covariance lost positivity")
        step = step * math.exp((cs / k["d_sigma"]) * (norm_ps / k["chi_n"] - 1.0))
        sigma = step * np.sqrt(C)
        return replace(
            state, mean=mean, sigma=sigma, generation=g,
            aux={"step": step, "C": C, "p_sigma": p_sigma, "p_c": p_c},
        )


def fd_gradient(shaped, z) -> np.ndarray:
    """Search-gradient estimate ``sum_i shaped_i z_i / N`` (descent direction is its negative)."""
    shaped = np.asarray(shaped, dtype=np.float64)
    return shaped @ z / len(shaped)


class OpenES(Strategy):
    """Antithetic finite-difference ES with an Adam-driven mean and fixed sigma."""

    name = "openes"
    antithetic = True

    def __init__(self, lr: float = 0.05, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def _init_aux(self, mean, sigma):
        return {"m": np.zeros_like(mean), "v": np.zeros_like(mean), "t": 0}

    def ask(self, state, key, n):
        if n % 2:
            raise ValueError(f"OpenES needs an even population size, got {n}")
        return super().ask(state, key, n)

    def tell(self, state, X, F):
        X, F = _check(state, X, F)
        if len(F) % 2:
            raise ValueError("OpenES tell needs an antithetic (even) population")
        z = (X - state.mean) / state.sigma
        if not np.allclose(z[0::2], -z[1::2], rtol=1e-6, atol=1e-8):
            raise ValueError("OpenES tell: population is not antithetic")
        grad = fd_gradient(centered_rank(F), z)
        aux = state.aux
        t = aux["t"] + 1
        m = self.beta1 * aux["m"] + (1 - self.beta1) * grad
        v = self.beta2 * aux["v"] + (1 - self.beta2) * grad * grad
        m_hat = m / (1 - self.beta1**t)
        v_hat = v / (1 - self.beta2**t)
        mean = state.mean - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return replace(state, mean=mean, generation=state.generation + 1, aux={"m": m, "v": v, "t": t})


class HillClimb(Strategy):
    """Elitist Gaussian hill climbing with multiplicative sigma decay."""

    name = "hillclimb"

    def __init__(self, decay: float = 0.999):
        self.decay = decay

    def _init_aux(self, mean, sigma):
        return {"best_f": math.inf, "best_x": mean.copy()}

    def tell(self, state, X, F):
        X, F = _check(state, X, F)
        i = int(np.argmin(F))
        aux = state.aux
        mean = state.mean
        if F[i] < aux["best_f"]:
            mean = X[i].copy()
            aux = {"best_f": float(F[i]), "best_x": X[i].copy()}
        return replace(state, mean=mean, sigma=state.sigma * self.decay, generation=state.generation + 1, aux=aux)


TEACHERS = {cls.name: cls for cls in (SNES, SepCMAES, OpenES, HillClimb)}


def make_teacher(name: str, **kwargs) -> Strategy:
    if name == "random":
        return RandomSearch()
    try:
        return TEACHERS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown teacher {name!r}; choose from {sorted(TEACHERS)}") from None
