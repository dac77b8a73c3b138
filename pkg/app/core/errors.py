"""
Error Types

Exception hierarchy shared by the library and the command line.
Each top-level family carries the process exit code the CLI returns for it.
"""


class P2FError(Exception):
    """Base class for all expected failures."""

    exit_code = 1


class ConfigError(P2FError):
    """Invalid, unknown or missing configuration."""

    exit_code = 2


class DataError(P2FError):
    """Missing, malformed or inconsistent data on disk or in memory."""

    exit_code = 3


class NumericError(P2FError):
    """Non-finite values or numerical domain violations."""

    exit_code = 4


class DimensionError(NumericError, ValueError):
    """Operand shapes do not agree."""


class DomainError(NumericError, ValueError):
    """An elementwise input lies outside the function's domain."""


class EvaluationError(NumericError):
    """A function evaluated to a non-finite value where a finite one was required."""


class GraphError(P2FError, RuntimeError):
    """Misuse of the autodiff tape."""


class ClassIndexError(P2FError, IndexError):
    """A class id lies outside the model's class range."""


class CheckpointParseError(DataError):
    """A checkpoint file could not be decoded.

    Attributes:
        offset: Byte offset at which decoding failed
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointIntegrityError(DataError):
    """A checkpoint's CRC does not match its contents."""
