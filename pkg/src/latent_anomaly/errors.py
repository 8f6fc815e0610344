"""Exception hierarchy.

Everything a user can trigger with bad input or configuration derives from
:class:`ConfigurationError` (a ``ValueError``); the CLI maps those to exit
code 1. :class:`InvariantViolation` signals a bug and maps to exit code 2.
"""


class ConfigurationError(ValueError):
    pass


class UndefinedStepError(ConfigurationError):
    pass


class DegenerateConditionError(ConfigurationError):
    pass


class DegenerateEmbeddingError(ConfigurationError):
    pass


class DegeneratePoolError(ConfigurationError):
    pass


class DegenerateStatsError(ConfigurationError):
    pass


class InvalidGridError(ConfigurationError):
    pass


class InvalidStepError(ConfigurationError):
    pass


class GenerationError(ConfigurationError):
    pass


class MetricUndefinedError(ConfigurationError):
    pass


class UndefinedMaskError(MetricUndefinedError):
    pass


class EmbeddingFileError(ConfigurationError):
    """Malformed embeddings file; ``lineno`` is 1-based."""

    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class CheckpointError(ConfigurationError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, step, lr, loss):
        self.step = step
        self.lr = lr
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at step {step} (learning rate {lr:g})")


class InvariantViolation(AssertionError):
    pass
