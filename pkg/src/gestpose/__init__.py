"""Gesture-guided 3D hand pose estimation on a small numpy autodiff core."""
from .errors import (ConfigError, ContractError, DegenerateRotationError, DimensionError,
                     GestPoseError, LabelError, ManifestError, MetricError, NumericError,
                     ParseError, TopologyError)
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DegenerateRotationError", "DimensionError", "GestPoseError",
    "LabelError", "ManifestError", "MetricError", "NumericError", "ParseError", "Tensor",
    "TopologyError", "backward", "no_grad",
]
