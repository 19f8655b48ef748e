import numpy as np
import torch

from evotf import rng
from evotf.features import FeatureTensors, PathState, featurize, stack_features
from evotf.model import init_params, param_shapes


def random_features(n, d, g, seed=0, batch=()):
    """Features of ``g`` random generations, stacked along the generation axis."""
    r = np.random.default_rng(seed)
    paths = PathState.init(d, batch)
    mean = r.normal(size=batch + (d,))
    sigma = np.exp(0.3 * r.normal(size=batch + (d,)))
    seq = []
    for _ in range(g):
        X = mean[..., None, :] + sigma[..., None, :] * r.normal(size=batch + (n, d))
        F = (X**2).sum(-1) + r.normal(size=batch + (n,))
        f, paths = featurize(X, F, mean, sigma, paths)
        seq.append(f)
        mean = mean + 0.1 * r.normal(size=mean.shape)
        sigma = sigma * np.exp(0.1 * r.normal(size=sigma.shape))
    return stack_features(seq)


def random_params(cfg, seed=0, head_scale=0.5):
    """Initialized weights with a non-zero output layer."""
    p = init_params(cfg, rng.key(seed))
    gen = torch.Generator().manual_seed(seed)
    for name in ("head2.w", "head2.b"):
        p[name] = head_scale * torch.randn(param_shapes(cfg)[name], generator=gen)
    return p


def to_double(feats: FeatureTensors):
    return FeatureTensors(*(torch.tensor(np.asarray(a), dtype=torch.float64) for a in
                            (feats.solution, feats.fitness, feats.distribution)))
