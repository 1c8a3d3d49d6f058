"""Exception types raised across the package."""


class CDRLError(Exception):
    """Base class for all errors raised by cdrl."""


class ConfigError(CDRLError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class ShapeError(CDRLError, ValueError):
    """Array shapes do not agree."""


class UsageError(CDRLError, RuntimeError):
    """An API was called in a state where it is not allowed."""


class NumericError(CDRLError, FloatingPointError):
    """A NaN or Inf showed up in a loss, gradient or activation."""


class CheckpointError(CDRLError, OSError):
    """A checkpoint could not be read or does not match the model."""


class ReportError(CDRLError, ValueError):
    """A harness CSV does not have the expected columns."""
