"""Exception hierarchy shared by all modules."""


class EmbDistillError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(EmbDistillError, ValueError):
    pass


class DegenerateInputError(EmbDistillError, ValueError):
    """Input is valid in shape but the operation is undefined on it
    (zero norm, zero variance, single-sample batch, ...)."""


class ContractError(EmbDistillError, RuntimeError):
    """A backward pass was handed a cache that does not belong to it."""


class ConfigError(EmbDistillError, ValueError):
    pass


class FormatError(EmbDistillError, ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SamplingError(EmbDistillError, ValueError):
    pass


class PruneStateError(EmbDistillError, RuntimeError):
    pass


class EvaluationError(EmbDistillError, ValueError):
    pass


class TrainingDivergedError(EmbDistillError, RuntimeError):
    """Raised when the training loss becomes non-finite.

    ``snapshot`` holds the epoch/batch position, the last finite loss and
    copies of the trainable parameters at the time of divergence.
    """

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


class GridSearchError(EmbDistillError, RuntimeError):
    def __init__(self, message: str, diagnostics: list):
        super().__init__(message)
        self.diagnostics = diagnostics
