"""Exception hierarchy shared by every subsystem.

The CLI maps each class onto an exit code, so library code should raise the
most specific one that applies.
"""


class BNNError(Exception):
    """Base class for all errors raised by this package."""

    category = "error"
    exit_code = 1


class ConfigError(BNNError, ValueError):
    """Invalid configuration, shapes, or arguments."""

    category = "config"
    exit_code = 2


class DataError(BNNError):
    """Malformed or missing dataset / model files."""

    category = "data"
    exit_code = 3


class NumericError(BNNError, FloatingPointError):
    """Non-finite values encountered during training."""

    category = "numeric"
    exit_code = 4
