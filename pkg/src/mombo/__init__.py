"""Moment-matching pessimistic value iteration for model-based offline RL.

The package bundles a small numpy network library, Gaussian moment
propagation through ReLU networks, Monte Carlo and bound utilities, a
dynamics ensemble, a SAC-style learner with three pessimistic targets and
two toy control tasks.
"""

from .errors import (
    ConfigError,
    DimensionError,
    InsufficientSamplesError,
    MomboError,
    TrainingError,
    UndefinedBoundError,
)
from .gaussmm import DiagonalGaussian, mm_forward, mm_relu, relu_moments
from .nncore import MlpParams, init_mlp, rng_stream

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DiagonalGaussian",
    "DimensionError",
    "InsufficientSamplesError",
    "MlpParams",
    "MomboError",
    "TrainingError",
    "UndefinedBoundError",
    "init_mlp",
    "mm_forward",
    "mm_relu",
    "relu_moments",
    "rng_stream",
]
