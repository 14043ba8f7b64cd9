"""Diffusion models for sampling arbitrary frame subsets of long videos."""
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import make_schedule, train
from .estimator import FlexibleDiffusionModel
from .schemes import SamplingScheme, SamplingStage, make_scheme, sample_videos, validate

__all__ = [
    "Denoiser",
    "DenoiserConfig",
    "FlexibleDiffusionModel",
    "SamplingScheme",
    "SamplingStage",
    "make_schedule",
    "make_scheme",
    "sample_videos",
    "train",
    "validate",
]
__version__ = "0.1.0"
