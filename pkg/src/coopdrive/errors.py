"""Shared exception types."""


class CoopDriveError(Exception):
    """Base class for all package errors."""


class DimensionError(CoopDriveError, ValueError):
    """Array shapes do not line up."""


class ParameterError(CoopDriveError, ValueError):
    """A numeric argument is outside its valid range."""


class ContractError(CoopDriveError, RuntimeError):
    """A caller violated a documented precondition."""


class NumericFault(CoopDriveError, FloatingPointError):
    """A computation produced NaN or Inf."""


class EncodingError(CoopDriveError, ValueError):
    """A vehicle state cannot be rasterized (off-road, negative speed)."""


class ConfigError(CoopDriveError, ValueError):
    """A configuration file or scenario definition is invalid."""


class CheckpointError(CoopDriveError, RuntimeError):
    """A checkpoint file is missing, corrupt, or has the wrong format/shapes."""
