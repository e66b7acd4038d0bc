"""
Exceptions shared by the recovery toolkit.
Library code raises these; only the CLI turns them into exit codes.
"""


class BlassoError(Exception):
    """Base class for every error raised by the toolkit."""
    exit_code = 1


class InputError(BlassoError, ValueError):
    """Argument outside the domain of an operation."""


class NumericalError(BlassoError, ArithmeticError):
    """A matrix that should be SPD is not."""


class ConditioningError(NumericalError):
    """Singular or rank-deficient linear system."""

    def __init__(self, message, smallest_eigenvalue=None):
        super().__init__(message)
        self.smallest_eigenvalue = smallest_eigenvalue


class UnsupportedConstantsError(InputError):
    """Tabulated constants requested outside their range of validity."""


class ConfigError(BlassoError):
    """Invalid experiment configuration; names the offending key."""
    exit_code = 2

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class CertificationError(BlassoError):
    """No certifying value was found inside the search bracket."""

    def __init__(self, message, bracket=None):
        super().__init__(message)
        self.bracket = bracket
