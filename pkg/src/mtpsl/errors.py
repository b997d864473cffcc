"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad protocol arguments, impossible label ratios,
    undefined task pairs, mismatched channel counts."""


class ShapeError(ValueError):
    """Tensor shape violates an operation's contract (wrong rank, spatial dims
    not divisible by the encoder stride, crop window out of bounds)."""


class UndefinedLossError(ValueError):
    """The loss has no defined value, e.g. every pixel of a segmentation
    target is the ignore value. Callers are expected to skip the term."""


class UndefinedMetricError(ValueError):
    """The metric has no defined value, e.g. no non-ignored pixels."""


class DatasetFormatError(RuntimeError):
    """A serialized container is unreadable: bad magic, version mismatch,
    truncated payload, or checksum failure."""


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss. Carries the diagnostic context."""

    def __init__(self, message: str, *, step: int, lr: float, terms: dict):
        super().__init__(message)
        self.step = step
        self.lr = lr
        self.terms = terms
