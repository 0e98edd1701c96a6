"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: config/usage problems exit 1, data and
file-format problems exit 2, numerical failures exit 3.
"""


class EmgMoeError(Exception):
    """Base class for all package errors."""


class ConfigError(EmgMoeError):
    """Invalid configuration or API usage."""


class ShapeError(ConfigError):
    """Operand shapes are incompatible for the requested operation."""


class DataError(EmgMoeError):
    """Input data violates a contract (bad labels, empty input, leakage)."""


class FormatError(DataError):
    """A binary container or checkpoint failed to parse."""


class NumericalError(EmgMoeError):
    """A numerical failure (NaN/Inf, domain violation) was detected."""


class DomainError(NumericalError):
    """An elementwise operation was evaluated outside its domain."""
