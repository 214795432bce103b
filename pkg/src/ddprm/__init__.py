"""Dependent Dirichlet process rating model: an infinite mixture of Rasch
partial credit models with covariate-localized stick-breaking weights."""

from .archive import PosteriorArchive
from .data import RatingDataset, read_ratings
from .estimator import DDPRatingModel
from .model import (ConfigurationError, DDPRMError, EmptyNeighborhoodError, LocalSubset,
                    MixtureDistribution, StickBreakState, linear_predictor, local_subset,
                    mixture_rating_probability, pcm_distribution, pcm_mean_var, stick_weights)
from .priors import HyperParams, fix_parameter
from .sampler import ChainConfig, SliceSampler, run_chain

__version__ = "0.1.0"

__all__ = [
    "ChainConfig", "ConfigurationError", "DDPRMError", "DDPRatingModel", "EmptyNeighborhoodError",
    "HyperParams", "LocalSubset", "MixtureDistribution", "PosteriorArchive",
    "RatingDataset", "SliceSampler", "StickBreakState", "fix_parameter",
    "linear_predictor", "local_subset", "mixture_rating_probability",
    "pcm_distribution", "pcm_mean_var", "read_ratings", "run_chain", "stick_weights",
]
