"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument is outside the domain an operation accepts."""


class GenerationError(RuntimeError):
    """Target generation exhausted its retry budget; reseed and try again."""


class EpisodeStateError(RuntimeError):
    """An environment method was called in the wrong episode state."""


class TrainingAbort(RuntimeError):
    """Training hit a non-finite loss or gradient and was stopped."""

    def __init__(self, message: str, checkpoint: str | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint
