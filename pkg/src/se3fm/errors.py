"""Exception categories shared across the package.

The CLI maps each category to a distinct exit code, so library code should
raise the most specific subclass that applies.
"""


class ConfigError(ValueError):
    """Bad configuration, task setup, or command-line arguments (exit 2)."""


class DataError(ValueError):
    """Malformed or unusable input data: files, manifests, structures (exit 3)."""


class NumericError(ArithmeticError):
    """Non-finite values or numerically invalid state encountered (exit 4)."""
