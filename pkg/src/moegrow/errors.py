"""Exception types shared across the package."""

from __future__ import annotations


class ValidationError(ValueError):
    """A config, checkpoint, or argument violates a structural contract."""


class CheckpointError(RuntimeError):
    """A checkpoint directory is missing, truncated, or malformed."""


class TrainingDiverged(RuntimeError):
    """The loss became non-finite."""

    def __init__(self, step: int | None = None, message: str | None = None):
        self.step = step
        if message is None:
            message = "non-finite loss" if step is None else f"non-finite loss at step {step}"
        super().__init__(message)
