"""Exception types shared across the package."""


class LotshareError(Exception):
    """Base class for all package errors."""


class ShapeError(LotshareError, ValueError):
    """Operands have incompatible shapes; the message names both."""


class ConfigError(LotshareError, ValueError):
    """Invalid configuration or arguments (CLI exit code 2)."""


class DataError(LotshareError, ValueError):
    """Malformed dataset or artifact file (CLI exit code 3)."""


class MaskFormatError(DataError):
    """Corrupt or truncated mask byte stream."""


class CheckpointFormatError(DataError):
    """Corrupt or incompatible checkpoint file."""


class StateError(LotshareError, RuntimeError):
    """Operation called in the wrong lifecycle state."""


class InvariantError(LotshareError, RuntimeError):
    """Internal invariant violated (CLI exit code 4)."""


class UndefinedMetricError(LotshareError, ValueError):
    """Metric not defined for the given inputs (e.g. single-class AUC)."""
