"""The Evolution Transformer.

Four per-generation encoders turn a generation's features into one embedding
per search dimension:

* solution Perceiver: latents attend over the population, separately for
  every dimension with shared weights;
* fitness Perceiver: latents attend over the population's fitness features,
  broadcast to every dimension;
* distribution attention: self-attention whose tokens are the search
  dimensions;
* cross-dimension Perceiver: latents attend over the dimension tokens,
  broadcast to every dimension.

The concatenated encodings are projected, get a sinusoidal encoding of the
position in the context window, and run through causal pre-LN Transformer
blocks with the dimension axis folded into the batch. A two-layer head emits
``(out_mean, out_sigma)`` per generation and dimension.

Parameters are a flat ``dict[str, Tensor]`` (see :func:`param_shapes`), which
keeps flattening for meta-evolution and weight perturbation trivial.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as tfn

from . import rng as rnglib
from .autodiff import DTYPE, matmul, softmax, trunc_normal
from .features import DISTRIBUTION_DIM, FITNESS_DIM, SOLUTION_DIM, FeatureTensors

__all__ = [
    "ModelConfig",
    "DistributionUpdate",
    "param_shapes",
    "param_count",
    "init_params",
    "flatten_params",
    "unflatten_params",
    "perceiver",
    "embed_generation",
    "forward",
    "apply_update",
    "attention_maps",
    "positional_encoding",
]


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 1
    num_heads: int = 2
    num_latents: int = 4
    latent_dim: int = 32
    embed_dim: int = 64
    key_dim: int = 64
    ff_mult: int = 4
    solution_dim: int = SOLUTION_DIM
    fitness_dim: int = FITNESS_DIM
    distribution_dim: int = DISTRIBUTION_DIM
    max_context: int = 32
    use_fitness: bool = True
    use_distribution: bool = True
    use_cross_dim: bool = True

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and not isinstance(v, bool) and v < 1:
                raise ValueError(f"{f.name} must be positive")

    @classmethod
    def reduced(cls, **kw) -> "ModelConfig":
        """Smaller variant without the cross-dimension Perceiver."""
        return cls(use_cross_dim=False, **kw)

    @classmethod
    def micro(cls, **kw) -> "ModelConfig":
        base = dict(num_latents=2, latent_dim=8, embed_dim=16, key_dim=8, ff_mult=2)
        base.update(kw)
        return cls(**base)

    @classmethod
    def ablation(cls, name: str, **kw) -> "ModelConfig":
        """'S', 'S+F', 'S+F+D' or 'S+F+D+CD'."""
        flags = {
            "S": (False, False, False),
            "S+F": (True, False, False),
            "S+F+D": (True, True, False),
            "S+F+D+CD": (True, True, True),
        }
        if name not in flags:
            raise ValueError(f"unknown ablation {name!r}")
        f, d, cd = flags[name]
        return cls(use_fitness=f, use_distribution=d, use_cross_dim=cd, **kw)

    @property
    def num_encoders(self) -> int:
        return 1 + self.use_fitness + self.use_distribution + self.use_cross_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class DistributionUpdate:
    out_mean: np.ndarray
    out_sigma: np.ndarray


def _perceiver_shapes(prefix, in_dim, cfg):
    k = cfg.key_dim
    return {
        f"{prefix}.latents": (cfg.num_latents, cfg.latent_dim),
        f"{prefix}.w_q": (cfg.latent_dim, k),
        f"{prefix}.w_k": (in_dim, k),
        f"{prefix}.w_v": (in_dim, k),
        f"{prefix}.ln.g": (k,),
        f"{prefix}.ln.b": (k,),
        f"{prefix}.ff1.w": (k, cfg.ff_mult * k),
        f"{prefix}.ff1.b": (cfg.ff_mult * k,),
        f"{prefix}.ff2.w": (cfg.ff_mult * k, k),
        f"{prefix}.ff2.b": (k,),
        f"{prefix}.proj.w": (cfg.num_latents * k, cfg.embed_dim),
        f"{prefix}.proj.b": (cfg.embed_dim,),
    }


def _block_shapes(prefix, cfg):
    e = cfg.embed_dim
    out = {f"{prefix}.ln1.g": (e,), f"{prefix}.ln1.b": (e,)}
    for n in ("q", "k", "v", "o"):
        out[f"{prefix}.attn.w{n}"] = (e, e)
        out[f"{prefix}.attn.b{n}"] = (e,)
    out.update({
        f"{prefix}.ln2.g": (e,),
        f"{prefix}.ln2.b": (e,),
        f"{prefix}.ff1.w": (e, cfg.ff_mult * e),
        f"{prefix}.ff1.b": (cfg.ff_mult * e,),
        f"{prefix}.ff2.w": (cfg.ff_mult * e, e),
        f"{prefix}.ff2.b": (e,),
    })
    return out


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every tensor, in canonical (flattening) order."""
    e = cfg.embed_dim
    shapes = {}
    shapes.update(_perceiver_shapes("sol", cfg.solution_dim, cfg))
    if cfg.use_fitness:
        shapes.update(_perceiver_shapes("fit", cfg.fitness_dim, cfg))
    if cfg.use_distribution:
        shapes["dist.in.w"] = (cfg.distribution_dim, e)
        shapes["dist.in.b"] = (e,)
        shapes.update(_block_shapes("dist.blk", cfg))
    if cfg.use_cross_dim:
        shapes.update(_perceiver_shapes("cd", cfg.distribution_dim, cfg))
    shapes["embed.w"] = (cfg.num_encoders * e, e)
    shapes["embed.b"] = (e,)
    for i in range(cfg.num_blocks):
        shapes.update(_block_shapes(f"tblk{i}", cfg))
    shapes["final_ln.g"] = (e,)
    shapes["final_ln.b"] = (e,)
    shapes["head1.w"] = (e, e)
    shapes["head1.b"] = (e,)
    shapes["head2.w"] = (e, 2)
    shapes["head2.b"] = (2,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, key: rnglib.RngKey) -> dict[str, torch.Tensor]:
    """Fan-in truncated-normal weights, zero biases, unit LN gains, zero output layer."""
    gen = torch.Generator().manual_seed(rnglib.seed_of(key))
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("head2."):
            params[name] = torch.zeros(shape, dtype=DTYPE)
        elif leaf == "latents":
            params[name] = trunc_normal(shape, 1.0, gen)
        elif leaf == "g":
            params[name] = torch.ones(shape, dtype=DTYPE)
        elif len(shape) == 1:
            params[name] = torch.zeros(shape, dtype=DTYPE)
        else:
            params[name] = trunc_normal(shape, 1.0 / math.sqrt(shape[0]), gen)
    return params


def flatten_params(params: dict[str, torch.Tensor], cfg: ModelConfig) -> np.ndarray:
    return np.concatenate([params[n].detach().reshape(-1).numpy() for n in param_shapes(cfg)]).astype(np.float32)


def unflatten_params(flat, cfg: ModelConfig) -> dict[str, torch.Tensor]:
    flat = np.asarray(flat, dtype=np.float32)
    if flat.shape != (param_count(cfg),):
        raise ValueError(f"flat parameter vector has shape {flat.shape}, expected ({param_count(cfg)},)")
    out, i = {}, 0
    for name, shape in param_shapes(cfg).items():
        n = math.prod(shape)
        out[name] = torch.from_numpy(flat[i:i + n].reshape(shape).copy())
        i += n
    return out


# -- building blocks ------------------------------------------------------------


def _ln(x, p, prefix):
    return tfn.layer_norm(x, x.shape[-1:], p[f"{prefix}.g"], p[f"{prefix}.b"], eps=1e-5)


def _ff(x, p, prefix):
    h = tfn.gelu(matmul(x, p[f"{prefix}.ff1.w"]) + p[f"{prefix}.ff1.b"])
    return matmul(h, p[f"{prefix}.ff2.w"]) + p[f"{prefix}.ff2.b"]


def perceiver(inputs: torch.Tensor, p: dict, prefix: str, cfg: ModelConfig, store: dict | None = None) -> torch.Tensor:
    """Latent cross-attention over the rows of ``inputs`` (..., M, F) -> (..., embed_dim).

    ``softmax(Z W_q (X W_k)^T / sqrt(d_k)) X W_v`` followed by a residual
    feed-forward on the latents, then flattened and projected.
    """
    if inputs.shape[-2] == 0:
        raise ValueError("perceiver needs at least one input row")
    q = matmul(p[f"{prefix}.latents"], p[f"{prefix}.w_q"])
    k = matmul(inputs, p[f"{prefix}.w_k"])
    v = matmul(inputs, p[f"{prefix}.w_v"])
    attn = softmax(matmul(q, k.transpose(-1, -2)) / math.sqrt(cfg.key_dim), axis=-1)
    if store is not None:
        store[prefix] = attn.detach()
    h = matmul(attn, v)
    h = h + _ff(_ln(h, p, f"{prefix}.ln"), p, prefix)
    return matmul(h.flatten(-2), p[f"{prefix}.proj.w"]) + p[f"{prefix}.proj.b"]


def _mhsa(x, p, prefix, heads, mask=None, store=None, store_key=None):
    *lead, t, e = x.shape
    dh = e // heads

    def split(y):
        return y.reshape(*lead, t, heads, dh).transpose(-2, -3)

    q = split(matmul(x, p[f"{prefix}.wq"]) + p[f"{prefix}.bq"])
    k = split(matmul(x, p[f"{prefix}.wk"]) + p[f"{prefix}.bk"])
    v = split(matmul(x, p[f"{prefix}.wv"]) + p[f"{prefix}.bv"])
    attn = softmax(matmul(q, k.transpose(-1, -2)) / math.sqrt(dh), axis=-1, mask=mask)
    if store is not None:
        store[store_key] = attn.detach()
    out = matmul(attn, v).transpose(-2, -3).reshape(*lead, t, e)
    return matmul(out, p[f"{prefix}.wo"]) + p[f"{prefix}.bo"]


def _block(x, p, prefix, cfg, mask=None, store=None):
    x = x + _mhsa(_ln(x, p, f"{prefix}.ln1"), p, f"{prefix}.attn", cfg.num_heads, mask, store, prefix)
    return x + _ff(_ln(x, p, f"{prefix}.ln2"), p, prefix)


def positional_encoding(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return pe.to(DTYPE)


def _as_tensor(a):
    if isinstance(a, torch.Tensor):
        return a
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))


def _check_features(feats, cfg):
    if feats.solution.shape[-1] != cfg.solution_dim:
        raise ValueError(f"solution features have {feats.solution.shape[-1]} channels, config expects {cfg.solution_dim}")
    if feats.fitness.shape[-1] != cfg.fitness_dim:
        raise ValueError(f"fitness features have {feats.fitness.shape[-1]} channels, config expects {cfg.fitness_dim}")
    if feats.distribution.shape[-1] != cfg.distribution_dim:
        raise ValueError(
            f"distribution features have {feats.distribution.shape[-1]} channels, config expects {cfg.distribution_dim}"
        )


def embed_generation(feats: FeatureTensors, p: dict, cfg: ModelConfig, store: dict | None = None) -> torch.Tensor:
    """Per-dimension embeddings ``(..., D, embed_dim)`` for one or more generations.

    Feature tensors may carry any leading axes: solution ``(..., N, D, C)``,
    fitness ``(..., N, C)``, distribution ``(..., D, C)``.
    """
    _check_features(feats, cfg)
    sol = _as_tensor(feats.solution)
    d = sol.shape[-2]
    parts = [perceiver(sol.transpose(-2, -3), p, "sol", cfg, store)]
    if cfg.use_fitness:
        h = perceiver(_as_tensor(feats.fitness), p, "fit", cfg, store)
        parts.append(h.unsqueeze(-2).expand(*h.shape[:-1], d, h.shape[-1]))
    dist = _as_tensor(feats.distribution)
    if cfg.use_distribution:
        tokens = matmul(dist, p["dist.in.w"]) + p["dist.in.b"]
        parts.append(_block(tokens, p, "dist.blk", cfg, store=store))
    if cfg.use_cross_dim:
        h = perceiver(dist, p, "cd", cfg, store)
        parts.append(h.unsqueeze(-2).expand(*h.shape[:-1], d, h.shape[-1]))
    return matmul(torch.cat(parts, dim=-1), p["embed.w"]) + p["embed.b"]


def forward(feats: FeatureTensors, p: dict, cfg: ModelConfig, store: dict | None = None) -> torch.Tensor:
    """Distribution updates ``(..., G, D, 2)`` for features with a generation axis.

    The generation axis is the one just before the population axis of the
    fitness features, i.e. fitness is ``(..., G, N, C)``. Output ``[..., 0]``
    is the mean update, ``[..., 1]`` the log-scale update.
    """
    g = feats.fitness.shape[-3] if feats.fitness.ndim >= 3 else 0
    if g == 0 or g > cfg.max_context:
        raise ValueError(f"context length {g} outside [1, {cfg.max_context}]")
    h = embed_generation(feats, p, cfg, store)  # (..., G, D, E)
    h = h + positional_encoding(g, cfg.embed_dim)[:, None, :]
    h = h.transpose(-2, -3)  # (..., D, G, E)
    mask = torch.tril(torch.ones(g, g, dtype=torch.bool))
    for i in range(cfg.num_blocks):
        h = _block(h, p, f"tblk{i}", cfg, mask=mask, store=store)
    h = _ln(h, p, "final_ln")
    h = tfn.gelu(matmul(h, p["head1.w"]) + p["head1.b"])
    out = matmul(h, p["head2.w"]) + p["head2.b"]
    return out.transpose(-2, -3)


def apply_update(mean, sigma, out_mean, out_sigma, lr_mean: float = 1.0, lr_sigma: float = 1.0):
    """mean' = mean + lr_mean * sigma * out_mean;  sigma' = sigma * exp(lr_sigma * out_sigma)."""
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("apply_update needs sigma > 0")
    return mean + lr_mean * sigma * out_mean, sigma * np.exp(lr_sigma * out_sigma)


def attention_maps(feats: FeatureTensors, p: dict, cfg: ModelConfig, generation: int = -1) -> dict[str, np.ndarray]:
    """Softmax maps of every module for one generation of a single trajectory.

    ``feats`` carries a generation axis and no batch axis. Returns
    ``solution`` (D, latents, N), ``fitness`` (latents, N), ``distribution``
    (heads, D, D), ``cross_dim`` (latents, D) and ``temporal`` (heads, G, G),
    the last averaged over search dimensions, for each enabled module.
    """
    store: dict = {}
    with torch.no_grad():
        forward(feats, p, cfg, store)
    out = {"solution": store["sol"][generation].numpy()}
    if cfg.use_fitness:
        out["fitness"] = store["fit"][generation].numpy()
    if cfg.use_distribution:
        out["distribution"] = store["dist.blk"][generation].numpy()
    if cfg.use_cross_dim:
        out["cross_dim"] = store["cd"][generation].numpy()
    for i in range(cfg.num_blocks):
        key = "temporal" if i == 0 else f"temporal{i}"
        out[key] = store[f"tblk{i}"].mean(dim=0).numpy()
    return out
