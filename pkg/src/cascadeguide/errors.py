"""Exception types shared across the package.

The CLI maps these onto process exit codes (see ``cli.EXIT_CODES``).
"""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class InputError(ValueError):
    """Malformed input data: wrong shape, non-finite values, bad sizes."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class NumericError(RuntimeError):
    """A computation produced non-finite values where finite ones are required."""
