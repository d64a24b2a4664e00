"""Exception hierarchy shared by every ddpc module."""

from typing import Optional


class DdpcError(Exception):
    """Base class for all errors raised by the toolkit"""


class InvalidInputError(DdpcError, ValueError):
    """Malformed numerical input: non-finite entries, shape mismatch, asymmetric weight"""


class DivergenceError(DdpcError):
    """Simulation left the numerically meaningful range"""


class DatasetParseError(DdpcError):
    """A dataset file could not be parsed"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InfeasibleProblemError(DdpcError):
    """A control problem has no feasible point, or the solver could not certify one"""

    def __init__(self, message: str, status: str = "infeasible"):
        self.status = status
        super().__init__(message)


class PreconditionError(DdpcError):
    """An operation was called outside the regime it is defined for"""


class ConfigError(DdpcError):
    """Experiment configuration is invalid"""
