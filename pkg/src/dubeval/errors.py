"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class DubevalError(Exception):
    pass


class ConfigError(DubevalError):
    """Invalid configuration (schema violation, bad hyperparameter)."""


class DataError(DubevalError):
    """Invalid or inconsistent data (parse failures, dimension mismatches,
    duplicate ids, missing artifacts)."""


class NumericError(DubevalError):
    """Numerical failure (NaN loss, degenerate variance, undefined statistic)."""
