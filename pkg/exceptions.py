"""
Error types shared by every package.

All errors derive from LvaError so the CLI can map them to a single exit
code; the ValueError mixins keep them catchable by generic callers.
"""

from typing import Optional


class LvaError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(LvaError, ValueError):
    """Operand dimensions do not match."""


class DataError(LvaError, ValueError):
    """Input data is non-finite or otherwise invalid."""


class ArgumentError(LvaError, ValueError):
    """An argument or precondition is violated."""


class UnsupportedModelError(LvaError):
    """The model's structure is not supported by the requested method."""


class ModelFormatError(LvaError):
    """A model or dataset document could not be parsed."""

    def __init__(self, message: str, context: Optional[str] = None):
        self.context = context
        super().__init__(f"{context}: {message}" if context else message)


class TrainingError(LvaError):
    """Training diverged (the loss became non-finite)."""

    def __init__(self, message: str, last_finite_epoch: int, last_finite_loss: Optional[float]):
        self.last_finite_epoch = last_finite_epoch
        self.last_finite_loss = last_finite_loss
        super().__init__(
            f"{message} (last finite epoch {last_finite_epoch}, loss {last_finite_loss})"
        )
