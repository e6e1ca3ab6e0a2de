"""Robust sparse Bayesian infinite factor model for covariance estimation."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

from .errors import ChainError, NumericalError, ParameterError, StructuralError
from .model import Dataset, ModelState, PosteriorSummary, SamplerConfig
from .chain import run_chain
from .adaptation import AdaptationPolicy
from .classifier import ClassifierModel

__all__ = [
    "AdaptationPolicy", "ChainError", "ClassifierModel", "Dataset", "ModelState",
    "NumericalError", "ParameterError", "PosteriorSummary", "SamplerConfig",
    "StructuralError", "run_chain",
]
