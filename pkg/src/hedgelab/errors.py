"""Shared exception types."""


class ValidationError(ValueError):
    """A specification, configuration, or argument failed its sanity checks."""


class EpisodeStateError(RuntimeError):
    """An episode operation was called in the wrong lifecycle state."""


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}
