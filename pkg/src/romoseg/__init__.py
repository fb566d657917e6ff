"""Iterative epipolar motion segmentation from optical flow and feature maps."""
from importlib import metadata as _metadata

try:
    __version__ = _metadata.version("artifact")
except _metadata.PackageNotFoundError:  # running from a source checkout
    __version__ = "0.1.0"

from .config import RunConfig, apply_overrides, load_config
from .errors import (AlignmentError, ConfigError, DegeneracyError, FormatError,
                     GenerationError, PipelineError, RomoError)

__all__ = [
    "__version__", "RunConfig", "apply_overrides", "load_config",
    "AlignmentError", "ConfigError", "DegeneracyError", "FormatError",
    "GenerationError", "PipelineError", "RomoError",
]
