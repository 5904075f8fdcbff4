"""Exception hierarchy.

Every error carries a short ``category`` used by the CLI for its
``error:<category>:`` prefix.
"""


class MixNetError(Exception):
    category = "internal"


class ShapeError(MixNetError, ValueError):
    category = "shape"


class ConfigError(MixNetError, ValueError):
    category = "config"


class UsageError(MixNetError, RuntimeError):
    category = "usage"


class InputError(MixNetError, ValueError):
    """Bad user-supplied data, e.g. image extents or unreadable files."""

    category = "input"


class WeightFormatError(MixNetError):
    category = "weights"


class BadMagicError(WeightFormatError):
    pass


class UnsupportedVersionError(WeightFormatError):
    pass


class TruncatedFileError(WeightFormatError):
    pass


class SchemaMismatchError(WeightFormatError):
    """Name or shape set in a weight file disagrees with the model config."""

    def __init__(self, message, extra=(), missing=(), mismatched=()):
        super().__init__(message)
        self.extra = list(extra)
        self.missing = list(missing)
        self.mismatched = list(mismatched)


class TrainingDivergedError(MixNetError, FloatingPointError):
    category = "diverged"

    def __init__(self, iteration: int, lr: float, loss: float):
        super().__init__(f"non-finite loss {loss!r} at iteration {iteration} (lr={lr:.3e})")
        self.iteration = iteration
        self.lr = lr
        self.loss = loss
