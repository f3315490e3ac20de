"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 1,
DataError -> 2, NumericError -> 3.
"""


class FcmaeError(Exception):
    """Base class for all package errors."""


class ConfigError(FcmaeError):
    """Invalid configuration: bad field, bad value, refused overwrite."""


class DataError(FcmaeError):
    """Invalid or inconsistent input data (shapes, files, alignment)."""


class NumericError(FcmaeError):
    """Numerical failure: non-convergence, singular system, degenerate input."""
