"""Spatial estimation and simulation with kriging-augmented quantile forests."""

from .core import RasterGrid, RunConfig, SampleSet, load_grid, load_samples, save_grid, save_samples
from .embedding import EmbeddedModelSpec, EmberModel, Envelope, estimate_grid, envelope_at, train_ember
from .errors import (
    ConfigurationError,
    DegenerateError,
    EmberError,
    MissingValueError,
    OutOfDomainError,
    ParseError,
    SingularSystemError,
    ValidationError,
)
from .variogram import VariogramModel

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "DegenerateError", "EmberError", "EmbeddedModelSpec", "EmberModel",
    "Envelope", "MissingValueError", "OutOfDomainError", "ParseError", "RasterGrid", "RunConfig",
    "SampleSet", "SingularSystemError", "ValidationError", "VariogramModel", "estimate_grid",
    "envelope_at", "load_grid", "load_samples", "save_grid", "save_samples", "train_ember",
]
