"""Joint pose refinement and neural surface reconstruction from posed images."""

from .errors import (ConfigError, DegenerateGeometry, DivergenceError, InvalidArgument,
                     ParseError, TapeStateError)
from .geometry import Intrinsics, Pose6

__all__ = [
    "ConfigError", "DegenerateGeometry", "DivergenceError", "InvalidArgument",
    "ParseError", "TapeStateError", "Intrinsics", "Pose6",
]
__version__ = "0.1.0"
