"""Exception hierarchy shared across the package."""


class MortGeeError(Exception):
    """Base class for all package errors."""


class ConfigError(MortGeeError):
    """Invalid run configuration or command usage."""


class ParseError(MortGeeError):
    """Malformed input table."""

    def __init__(self, message: str, lineno: int | None = None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class DataError(MortGeeError):
    """Input data violates an integrity requirement (duplicates, gaps, zeros)."""


class DomainError(MortGeeError):
    """Argument outside the mathematical domain of an operation."""


class DegenerateDataError(MortGeeError):
    """Input carries no usable variation (e.g. constant columns)."""


class DesignError(MortGeeError):
    """Design matrix cannot be built or used (rank deficiency, label mismatch)."""


class ConvergenceError(MortGeeError):
    """Iterative fit failed to converge."""
