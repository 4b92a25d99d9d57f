"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class CuspError(Exception):
    """Base class for all package errors."""


class ConfigError(CuspError, ValueError):
    """Invalid configuration (bad spec, plan, simulation config)."""


class DataError(CuspError, ValueError):
    """Input data that cannot be used (malformed rows, too few observations)."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericalError(CuspError, ArithmeticError):
    """A numerical routine failed (quadrature, non-finite likelihood)."""


class NonFiniteLikelihood(NumericalError):
    """Raised when the log-likelihood of an observation is not finite.

    The offending observation index is kept in ``index``.
    """

    def __init__(self, index, message="non-finite log-likelihood"):
        super().__init__(f"{message} at observation t={index}")
        self.index = index
