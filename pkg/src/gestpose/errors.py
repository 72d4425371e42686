"""Exception types raised across the package."""


class GestPoseError(Exception):
    """Base class for all package errors."""


class DimensionError(GestPoseError, ValueError):
    """Operand shapes are incompatible."""


class LabelError(GestPoseError, ValueError):
    """A class label is out of range or inconsistent with the taxonomy."""


class ContractError(GestPoseError, ValueError):
    """A call violates an operation's precondition."""


class NumericError(GestPoseError, FloatingPointError):
    """Non-finite values reached an operation that requires finite input."""


class DegenerateRotationError(GestPoseError, ValueError):
    """A 6D rotation has a zero or collinear basis vector."""


class ConfigError(GestPoseError, ValueError):
    """Invalid or unknown configuration."""


class ParseError(GestPoseError, ValueError):
    """A dataset or config file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ManifestError(GestPoseError, ValueError):
    """A checkpoint header does not match its payload or the target model."""


class TopologyError(GestPoseError, ValueError):
    """Two meshes do not share vertex topology."""


class MetricError(GestPoseError, ValueError):
    """A metric is undefined for the given labeling."""
