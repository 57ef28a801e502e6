"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Array dimensions disagree with a model configuration or with each other."""


class LayoutMismatchError(ValueError):
    """Two parameter vectors with different layouts were combined."""


class ZeroNormError(ValueError):
    """Cosine quantities are undefined for an all-zero vector."""


class NonFiniteLossError(ArithmeticError):
    def __init__(self, sample_index: int, message: str | None = None):
        self.sample_index = sample_index
        super().__init__(message or f"non-finite loss at sample {sample_index}")


class InsufficientSamplesError(ValueError):
    def __init__(self, task_id, message: str):
        self.task_id = task_id
        super().__init__(f"task {task_id!r}: {message}")


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, cause: Exception | None = None):
        self.epoch = epoch
        self.cause = cause
        detail = f": {cause}" if cause is not None else ""
        super().__init__(f"training diverged at epoch {epoch}{detail}")


class RadiusUnresolvedError(RuntimeError):
    """No drift-profile entry keeps the base drift within epsilon."""

    def __init__(self, message: str = "radius unresolved"):
        super().__init__(message)


class ConfigError(ValueError):
    """An experiment configuration is malformed or inconsistent."""
