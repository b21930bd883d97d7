"""Exception types shared across the package.

The CLI maps these onto exit codes: ``ConfigError``/``DimensionError``/
``DataError`` exit with 2, ``NumericError`` with 3.
"""


class AnticipationError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(AnticipationError, ValueError):
    """Tensor extents do not agree."""


class ConfigError(AnticipationError, ValueError):
    """Invalid configuration value or incompatible artifact."""


class ContractError(AnticipationError, RuntimeError):
    """An operation was called outside its precondition."""


class DataError(AnticipationError, ValueError):
    """Dataset or score records are inconsistent."""


class NumericError(AnticipationError, FloatingPointError):
    """A NaN or infinity reached a place where finite values are required."""
