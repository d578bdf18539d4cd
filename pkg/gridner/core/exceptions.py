"""
Exceptions
Error hierarchy shared by every layer. The CLI maps these onto exit codes.
"""

from typing import Any, Optional


class GridNERError(Exception):
    """Base class for all errors raised by gridner."""

    exit_code = 2

    def __init__(self, message: str, detail: Optional[Any] = None):
        super().__init__(message)
        self.message = message
        self.detail = detail


class ShapeError(GridNERError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class IndexRangeError(GridNERError, IndexError):
    """An integer id lies outside the table it indexes."""


class ConfigError(GridNERError, ValueError):
    """Invalid configuration value or combination."""


class ContractError(GridNERError, RuntimeError):
    """A precondition between cooperating components was violated."""


class NonFiniteError(GridNERError, FloatingPointError):
    """A NaN or Inf appeared in a loss, gradient or activation."""

    exit_code = 1


class CorpusParseError(GridNERError, ValueError):
    """The corpus file is not well-formed JSON of the expected layout."""


class CorpusValidationError(GridNERError, ValueError):
    """A corpus record violates an annotation invariant."""

    def __init__(self, message: str, record_index: int, violations: list):
        super().__init__(message, detail=violations)
        self.record_index = record_index
        self.violations = violations


class CheckpointError(GridNERError, ValueError):
    """Checkpoint file is corrupt, from another version, or does not fit the config."""
