"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class BlendrecError(Exception):
    """Base class for package errors."""


class ConfigError(BlendrecError):
    """Invalid or inconsistent run configuration."""


class DataError(BlendrecError):
    """Malformed, empty, or insufficient input data."""


class NumericError(BlendrecError):
    """Non-finite values or diverging optimization."""
