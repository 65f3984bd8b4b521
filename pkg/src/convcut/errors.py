"""Exception hierarchy shared by every convcut module."""


class ConvCutError(Exception):
    """Base class for all errors raised by convcut."""


class DimensionError(ConvCutError, ValueError):
    """Tensor shapes are incompatible with an operation or layer."""


class ConfigError(ConvCutError, ValueError):
    """A configuration value is missing, unknown or out of range."""


class DataError(ConvCutError, ValueError):
    """Input data (images, labels) is malformed."""


class LoadError(ConvCutError):
    """A checkpoint could not be read or applied."""


class ContractError(ConvCutError, RuntimeError):
    """An API was called in a state that violates its preconditions."""


class NumericalError(ConvCutError, FloatingPointError):
    """An operation produced NaN or Inf from finite inputs."""


class LayerLookupError(ConvCutError, LookupError):
    """A layer name does not exist in the model."""
