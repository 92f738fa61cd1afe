"""Exception hierarchy. Each class maps to one CLI exit code."""


class DinoBenchError(Exception):
    exit_code = 1
    category = "error"


class ConfigError(DinoBenchError, ValueError):
    """Invalid configuration, shape/structure mismatch between config and weights."""

    exit_code = 2
    category = "config"


class DimensionError(ConfigError):
    """Incompatible tensor extents."""


class ParameterError(ConfigError):
    """Out-of-range scalar argument (temperature, sigma, ...)."""


class UsageError(DinoBenchError, RuntimeError):
    exit_code = 2
    category = "usage"


class DataError(DinoBenchError, IOError):
    """Unreadable, corrupt or malformed input data."""

    exit_code = 3
    category = "data"


class ChecksumError(DataError):
    pass


class NumericError(DinoBenchError, ArithmeticError):
    """Non-finite values crossed a check barrier."""

    exit_code = 4
    category = "numeric"
