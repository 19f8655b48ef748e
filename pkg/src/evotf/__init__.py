"""Evolution Transformer: a causal Transformer that acts as a diagonal-Gaussian evolution strategy."""

from .model import ModelConfig, forward, init_params, param_count
from .rollout import EvoTfStrategy, run_strategy
from .teachers import make_teacher

__version__ = "0.1.0"

__all__ = ["ModelConfig", "EvoTfStrategy", "forward", "init_params", "make_teacher", "param_count", "run_strategy"]
