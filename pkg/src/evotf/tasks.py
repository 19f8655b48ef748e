"""Synthetic benchmark tasks.

Axis-aligned BBOB-style functions evaluated at ``z = x - offset`` (every
function attains 0 at its documented optimizer, ``z = 0`` except for
Rosenbrock whose minimizer is ``z = 1``), the small/medium/large task
families, and two classic-control neuroevolution tasks scored by policy
rollouts. Everything minimizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rnglib

__all__ = [
    "FUNCTIONS",
    "TASK_SETS",
    "TaskSpec",
    "TaskSet",
    "ControlTask",
    "eval_bbob",
    "bbob_batch",
    "sample_task",
    "task_set",
    "eval_policy",
    "mlp_param_count",
    "OFFSET_RANGE",
]

OFFSET_RANGE = 3.0


def _conditioning(alpha: float, d: int) -> np.ndarray:
    """Diagonal of the BBOB Lambda^alpha matrix."""
    if d == 1:
        return np.array([alpha**0.5])
    return alpha ** (0.5 * np.arange(d) / (d - 1))


def _penalty(z: np.ndarray) -> np.ndarray:
    return np.sum(np.maximum(0.0, np.abs(z) - 5.0) ** 2, axis=-1)


def sphere(z):
    return np.sum(z * z, axis=-1)


def rosenbrock(z):
    a, b = z[..., :-1], z[..., 1:]
    return np.sum(100.0 * (b - a * a) ** 2 + (1.0 - a) ** 2, axis=-1)


def discus(z):
    sq = z * z
    return 1e6 * sq[..., 0] + np.sum(sq[..., 1:], axis=-1)


def rastrigin(z):
    d = z.shape[-1]
    y = z * _conditioning(10.0, d)
    return 10.0 * (d - np.sum(np.cos(2 * np.pi * y), axis=-1)) + np.sum(y * y, axis=-1)


_SCHWEFEL_OPT = 420.9687462275036
_SCHWEFEL_CONST = 4.189828872724339


def schwefel(z):
    d = z.shape[-1]
    u = 200.0 * _conditioning(10.0, d) * z + _SCHWEFEL_OPT
    core = -np.sum(u * np.sin(np.sqrt(np.abs(u))), axis=-1) / (100.0 * d) + _SCHWEFEL_CONST
    return core + 100.0 * _penalty(u / 100.0)


def bueche_rastrigin(z):
    d = z.shape[-1]
    s = _conditioning(10.0, d) * np.ones_like(z)
    odd = (np.arange(d) % 2 == 0) & (z > 0)  # odd 1-based coordinates
    s = np.where(odd, 10.0 * s, s)
    y = s * z
    return 10.0 * (d - np.sum(np.cos(2 * np.pi * y), axis=-1)) + np.sum(y * y, axis=-1) + 100.0 * _penalty(z)


def attractive_sector(z):
    y = z * _conditioning(10.0, z.shape[-1])
    s = np.where(y > 0, 100.0, 1.0)
    return np.sum((s * y) ** 2, axis=-1) ** 0.9


_W_K = np.arange(12)
_W_F0 = float(np.sum(0.5**_W_K * np.cos(np.pi * 3.0**_W_K)))


def weierstrass(z):
    d = z.shape[-1]
    y = z * _conditioning(0.01, d)
    terms = 0.5**_W_K * np.cos(2 * np.pi * 3.0**_W_K * (y[..., None] + 0.5))
    inner = np.sum(terms, axis=(-1, -2)) / d - _W_F0
    return 10.0 * inner**3 + 10.0 * _penalty(z) / d


def schaffers_f7(z):
    d = z.shape[-1]
    y = z * _conditioning(10.0, d)
    s = np.sqrt(y[..., :-1] ** 2 + y[..., 1:] ** 2)
    root = np.sqrt(s)
    core = (np.sum(root + root * np.sin(50.0 * s**0.2) ** 2, axis=-1) / max(d - 1, 1)) ** 2
    return core + 10.0 * _penalty(z)


def griewank_rosen(z):
    d = z.shape[-1]
    y = max(1.0, math.sqrt(d) / 8.0) * z + 1.0
    s = 100.0 * (y[..., :-1] ** 2 - y[..., 1:]) ** 2 + (y[..., :-1] - 1.0) ** 2
    if d == 1:
        return np.zeros(z.shape[:-1])
    return 10.0 * np.sum(s / 4000.0 - np.cos(s), axis=-1) / (d - 1) + 10.0


FUNCTIONS = {
    "sphere": sphere,
    "rosenbrock": rosenbrock,
    "discus": discus,
    "rastrigin": rastrigin,
    "schwefel": schwefel,
    "bueche_rastrigin": bueche_rastrigin,
    "attractive_sector": attractive_sector,
    "weierstrass": weierstrass,
    "schaffers_f7": schaffers_f7,
    "griewank_rosen": griewank_rosen,
}

_SMALL = ("sphere",)
_MEDIUM = _SMALL + ("rosenbrock", "discus", "rastrigin", "schwefel")
_LARGE = _MEDIUM + ("bueche_rastrigin", "attractive_sector", "weierstrass", "schaffers_f7", "griewank_rosen")


@dataclass(frozen=True)
class TaskSet:
    name: str
    members: tuple[str, ...]


TASK_SETS = {
    "small": TaskSet("small", _SMALL),
    "medium": TaskSet("medium", _MEDIUM),
    "large": TaskSet("large", _LARGE),
}


def task_set(name: str) -> TaskSet:
    try:
        return TASK_SETS[name]
    except KeyError:
        raise ValueError(f"unknown task set {name!r}; choose from {sorted(TASK_SETS)}") from None


@dataclass(frozen=True)
class TaskSpec:
    function_id: str
    dims: int
    offset: tuple[float, ...]
    seed: int = 0

    def __post_init__(self):
        if self.function_id not in FUNCTIONS:
            raise ValueError(f"unknown BBOB function {self.function_id!r}")
        if self.dims < 1 or len(self.offset) != self.dims:
            raise ValueError(f"offset length {len(self.offset)} does not match dims {self.dims}")

    @classmethod
    def centered(cls, function_id: str, dims: int, seed: int = 0) -> "TaskSpec":
        return cls(function_id, dims, (0.0,) * dims, seed)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return bbob_batch(self, x)


def eval_bbob(spec: TaskSpec, x) -> float:
    """f(x - offset) for a single point."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.dims,):
        raise ValueError(f"expected a point of length {spec.dims}, got shape {x.shape}")
    return float(FUNCTIONS[spec.function_id](x - np.asarray(spec.offset)))


def bbob_batch(spec: TaskSpec, x: np.ndarray) -> np.ndarray:
    """Vectorized evaluation over leading axes of ``x`` (last axis = dims)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.dims:
        raise ValueError(f"expected points of length {spec.dims}, got shape {x.shape}")
    return FUNCTIONS[spec.function_id](x - np.asarray(spec.offset))


def sample_task(tasks: TaskSet | str, dims: int, key: rnglib.RngKey) -> TaskSpec:
    """Uniform function choice from the set and offsets i.i.d. U[-3, 3]."""
    if isinstance(tasks, str):
        tasks = task_set(tasks)
    if not tasks.members:
        raise ValueError("cannot sample from an empty task set")
    if dims < 1:
        raise ValueError("dims must be >= 1")
    gen = rnglib.generator(key)
    fid = tasks.members[int(gen.integers(len(tasks.members)))]
    offset = gen.uniform(-OFFSET_RANGE, OFFSET_RANGE, dims)
    return TaskSpec(fid, dims, tuple(float(v) for v in offset), seed=rnglib.seed_of(key) % 2**31)


# -- classic control -----------------------------------------------------------

_ENVS = {"cartpole": (4, 1), "pendulum": (3, 1)}


@dataclass(frozen=True)
class ControlTask:
    env_id: str = "cartpole"
    hidden: tuple[int, ...] = (16, 16)
    episode_length: int = 200
    num_rollouts: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.env_id not in _ENVS:
            raise ValueError(f"unknown control env {self.env_id!r}")

    @property
    def layout(self) -> tuple[int, ...]:
        obs, act = _ENVS[self.env_id]
        return (obs, *self.hidden, act)

    @property
    def dims(self) -> int:
        return mlp_param_count(self.layout)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1, x.shape[-1])
        return np.array([eval_policy(self, w) for w in flat]).reshape(x.shape[:-1])


def mlp_param_count(layout) -> int:
    return sum(a * b + b for a, b in zip(layout[:-1], layout[1:]))


def _unpack(layout, flat):
    layers, i = [], 0
    for a, b in zip(layout[:-1], layout[1:]):
        w = flat[i:i + a * b].reshape(a, b)
        i += a * b
        layers.append((w, flat[i:i + b]))
        i += b
    return layers


def _policy(layers, obs):
    h = obs
    for j, (w, b) in enumerate(layers):
        h = h @ w + b
        if j < len(layers) - 1:
            h = np.tanh(h)
    return h[..., 0]


def _cartpole(layers, init, steps):
    gravity, masscart, masspole, length, force_mag, tau = 9.8, 1.0, 0.1, 0.5, 10.0, 0.02
    total_mass = masscart + masspole
    polemass_length = masspole * length
    theta_limit = 12 * 2 * math.pi / 360
    state = init.copy()
    alive = np.ones(len(state), dtype=bool)
    ret = np.zeros(len(state))
    for _ in range(steps):
        action = _policy(layers, state) > 0
        force = np.where(action, force_mag, -force_mag)
        x, x_dot, theta, theta_dot = state.T
        cos, sin = np.cos(theta), np.sin(theta)
        temp = (force + polemass_length * theta_dot**2 * sin) / total_mass
        theta_acc = (gravity * sin - cos * temp) / (length * (4.0 / 3.0 - masspole * cos**2 / total_mass))
        x_acc = temp - polemass_length * theta_acc * cos / total_mass
        state = np.stack(
            [x + tau * x_dot, x_dot + tau * x_acc, theta + tau * theta_dot, theta_dot + tau * theta_acc], axis=1
        )
        ret += alive
        alive &= (np.abs(state[:, 0]) <= 2.4) & (np.abs(state[:, 2]) <= theta_limit)
        if not alive.any():
            break
    return ret


def _pendulum(layers, init, steps):
    max_speed, max_torque, dt, g, m, l = 8.0, 2.0, 0.05, 10.0, 1.0, 1.0
    theta, theta_dot = init[:, 0].copy(), init[:, 1].copy()
    ret = np.zeros(len(theta))
    for _ in range(steps):
        obs = np.stack([np.cos(theta), np.sin(theta), theta_dot], axis=1)
        u = max_torque * np.tanh(_policy(layers, obs))
        angle = ((theta + np.pi) % (2 * np.pi)) - np.pi
        ret -= angle**2 + 0.1 * theta_dot**2 + 0.001 * u**2
        theta_dot = np.clip(theta_dot + (3 * g / (2 * l) * np.sin(theta) + 3.0 / (m * l**2) * u) * dt, -max_speed, max_speed)
        theta = theta + theta_dot * dt
    return ret


def eval_policy(task: ControlTask, flat_weights, seed: int | None = None) -> float:
    """Negated mean episodic return of the MLP policy over seeded episodes."""
    w = np.asarray(flat_weights, dtype=np.float64)
    if w.shape != (task.dims,):
        raise ValueError(f"{task.env_id} policy needs {task.dims} weights, got shape {w.shape}")
    layers = _unpack(task.layout, w)
    k = rnglib.key(task.seed if seed is None else seed)
    if task.env_id == "cartpole":
        init = rnglib.uniform(k, (task.num_rollouts, 4), -0.05, 0.05)
        returns = _cartpole(layers, init, task.episode_length)
    else:
        init = np.stack(
            [rnglib.uniform(rnglib.split(k, 0), task.num_rollouts, -np.pi, np.pi),
             rnglib.uniform(rnglib.split(k, 1), task.num_rollouts, -1.0, 1.0)],
            axis=1,
        )
        returns = _pendulum(layers, init, task.episode_length)
    return -float(np.mean(returns))
