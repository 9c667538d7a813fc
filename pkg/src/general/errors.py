"""
Exception hierarchy shared by the library and the command layer.
"""


class ChorusError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigurationError(ChorusError, ValueError):
    """Invalid tunable, budget, regime name or capacity."""

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        if key:
            message = f"{key}: {message}"
        super().__init__(message)


class ContractViolation(ChorusError, ValueError):
    """A precondition of an operation does not hold (shape, size, range)."""


class NumericFailure(ChorusError, ArithmeticError):
    """NaN/Inf produced during a forward or backward pass."""

    def __init__(self, node: str, detail: str = "non-finite value"):
        self.node = node
        super().__init__(f"{detail} at {node}")


class CheckpointError(ChorusError):
    """Malformed or unsupported checkpoint file."""


class StorageError(ChorusError, OSError):
    """Missing input files or refused overwrites."""


def error_record(exc: BaseException) -> dict:
    """Machine-readable failure record used by commands and the CLI."""
    return {"success": False, "error": str(exc), "error_type": type(exc).__name__}
