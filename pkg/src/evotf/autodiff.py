"""Dense tensor primitives, reverse-mode gradients and the Adam optimizer.

Tensors are float32 ``torch.Tensor`` values and the reverse-mode tape is
torch's autograd graph. This module pins the handful of contracts the
trainers rely on: shape-checked matmul, masked softmax that refuses fully
masked slices, gradients that are zero (not missing) for untouched leaves,
a functional Adam, the cosine-warmup schedule and global-norm clipping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import torch

DTYPE = torch.float32

__all__ = [
    "DTYPE",
    "AdamState",
    "adam_init",
    "adam_step",
    "backward",
    "clip_global_norm",
    "cosine_warmup_lr",
    "global_norm",
    "matmul",
    "softmax",
    "trunc_normal",
]


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched matrix product ``a @ b`` with an explicit shape check."""
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return torch.matmul(a, b)


def softmax(x: torch.Tensor, axis: int = -1, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False come out exactly 0."""
    if mask is None:
        return torch.softmax(x, dim=axis)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    full = torch.broadcast_to(mask, x.shape)
    if not bool(full.any(dim=axis).all()):
        raise ValueError("softmax: a slice is fully masked")
    return torch.softmax(x.masked_fill(~full, float("-inf")), dim=axis)


def backward(loss: torch.Tensor, leaves: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """d loss / d leaf for every leaf; leaves off the loss path get zeros."""
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    grads = torch.autograd.grad(loss.reshape(()), list(leaves), allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(leaves, grads)]


def global_norm(grads: Mapping[str, torch.Tensor] | Sequence[torch.Tensor]) -> float:
    values = grads.values() if isinstance(grads, Mapping) else grads
    total = 0.0
    for g in values:
        total += float(torch.sum(g.double() * g.double()))
    return math.sqrt(total)


def clip_global_norm(grads: dict[str, torch.Tensor], max_norm: float = 1.0) -> tuple[dict[str, torch.Tensor], float]:
    """Rescale all gradients jointly when their global L2 norm exceeds ``max_norm``.

    Returns the (possibly rescaled) gradients and the pre-clip norm.
    """
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def cosine_warmup_lr(step: int, warmup_steps: int, total_steps: int, peak: float = 0.0015, floor: float = 1e-5) -> float:
    """Linear 0 -> peak over ``warmup_steps``, then cosine peak -> floor at ``total_steps``."""
    if warmup_steps >= total_steps:
        raise ValueError("warmup_steps must be smaller than total_steps")
    step = min(max(step, 0), total_steps)
    if step < warmup_steps:
        return peak * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    extra: dict = field(default_factory=dict)


def adam_init(params: Mapping[str, torch.Tensor], beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(
        m={k: torch.zeros_like(p) for k, p in params.items()},
        v={k: torch.zeros_like(p) for k, p in params.items()},
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: AdamState,
    lr: float,
) -> tuple[dict[str, torch.Tensor], AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    if params.keys() != grads.keys():
        raise ValueError("adam_step: parameter and gradient names differ")
    t = state.t + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"adam_step: gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
            m = b1 * state.m[name] + (1.0 - b1) * g
            v = b2 * state.v[name] + (1.0 - b2) * g * g
            new_params[name] = p - lr * (m / c1) / (torch.sqrt(v / c2) + eps)
            new_m[name] = m
            new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v, t=t, beta1=b1, beta2=b2, eps=eps)


def trunc_normal(shape, std: float, gen: torch.Generator) -> torch.Tensor:
    """Normal(0, std) truncated at two standard deviations."""
    out = torch.empty(shape, dtype=DTYPE)
    torch.nn.init.trunc_normal_(out, mean=0.0, std=std, a=-2.0 * std, b=2.0 * std, generator=gen)
    return out
