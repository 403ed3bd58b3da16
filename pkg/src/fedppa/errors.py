"""Exception hierarchy shared by every module."""


class FedError(Exception):
    """Base class for all errors raised by the simulator."""


class DimensionError(FedError, ValueError):
    """Array shapes disagree with an architecture or with each other."""


class NumericError(FedError, ArithmeticError):
    """A NaN or infinity surfaced at an operation boundary."""


class InputError(FedError, ValueError):
    """Caller-supplied data violates an operation's precondition."""


class FormatError(FedError, ValueError):
    """A file does not follow the expected on-disk layout."""


class ConfigError(FedError, ValueError):
    """A run configuration is invalid. ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class ConsistencyError(FedError, RuntimeError):
    """Internal bookkeeping went out of sync (e.g. mismatched cluster tensors)."""
