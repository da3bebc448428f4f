"""Bayes-optimal analysis of single-layer attention-indexed models.

Submodules: ``spectra`` (random-matrix engine), ``channels`` (output channels
and scores), ``state_evolution`` (overlap fixed points, thresholds, limit
curves), ``model`` (teachers, datasets, exact deep-stack mapping), ``amp``
(message-passing estimator), ``gd`` (gradient-descent baselines), ``cli``.
"""

from .channels import ChannelKind, hardmax, linear, softmax
from .model import Teacher, generate_dataset, overlap, sample_teacher
from .spectra import SpectralDensity, WishartPrior
from .state_evolution import SEOptions, SEResult, solve_fixed_point

__all__ = [
    "ChannelKind",
    "hardmax",
    "linear",
    "softmax",
    "Teacher",
    "generate_dataset",
    "overlap",
    "sample_teacher",
    "SpectralDensity",
    "WishartPrior",
    "SEOptions",
    "SEResult",
    "solve_fixed_point",
]

__version__ = "0.1.0"
