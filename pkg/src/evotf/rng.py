"""Splittable, counter-based random keys.

Keys are immutable 128-bit values. Children are derived by hashing the parent
words together with an integer (or string) label, and draws come from a
Philox generator keyed by the 128 bits, so any key can be split or sampled
from any thread without shared state.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RngKey",
    "key",
    "split",
    "generator",
    "normal",
    "uniform",
    "normal_antithetic",
    "seed_of",
]


@dataclass(frozen=True)
class RngKey:
    words: tuple[int, int, int, int]

    def __post_init__(self):
        if len(self.words) != 4 or any(not 0 <= w < 2**32 for w in self.words):
            raise ValueError(f"RngKey needs four 32-bit words, got {self.words}")

    def as_int(self) -> int:
        out = 0
        for w in self.words:
            out = (out << 32) | w
        return out


def _label_int(label: int | str) -> int:
    if isinstance(label, str):
        return zlib.crc32(label.encode()) + 2**32
    if label < 0:
        raise ValueError("labels must be non-negative")
    return int(label)


def key(seed: int) -> RngKey:
    """Root key for an integer seed."""
    state = np.random.SeedSequence(int(seed)).generate_state(4, dtype=np.uint32)
    return RngKey(tuple(int(w) for w in state))


def split(parent: RngKey, label: int | str) -> RngKey:
    """Deterministic child key; distinct labels give distinct children."""
    seq = np.random.SeedSequence(entropy=list(parent.words), spawn_key=(_label_int(label),))
    return RngKey(tuple(int(w) for w in seq.generate_state(4, dtype=np.uint32)))


def generator(k: RngKey) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=k.as_int()))


def normal(k: RngKey, shape) -> np.ndarray:
    return generator(k).standard_normal(shape)


def uniform(k: RngKey, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    if not lo < hi:
        raise ValueError(f"uniform needs lo < hi, got [{lo}, {hi})")
    out = generator(k).uniform(lo, hi, shape)
    # guard the rare rounding of lo + (hi - lo) * u up to hi
    return np.where(out >= hi, np.nextafter(hi, lo), out)


def normal_antithetic(k: RngKey, shape) -> np.ndarray:
    """Standard normals along axis 0 with rows (2j, 2j+1) exactly negated."""
    shape = tuple(shape)
    if shape[0] % 2:
        raise ValueError(f"antithetic sampling needs an even leading extent, got {shape[0]}")
    half = normal(k, (shape[0] // 2,) + shape[1:])
    out = np.empty(shape)
    out[0::2] = half
    out[1::2] = -half
    return out


def seed_of(k: RngKey) -> int:
    """A 63-bit integer seed for libraries that want one (e.g. torch)."""
    return k.as_int() & (2**63 - 1)
