"""Exception hierarchy shared across the package."""


class LaiFusionError(Exception):
    """Base class for every error raised by laifusion."""


class ContractViolation(LaiFusionError, ValueError):
    """An operation was called with arguments that break its shape contract."""


class InvalidGeometry(LaiFusionError, ValueError):
    """Spatial dimensions are incompatible with the requested operation."""


class NumericalError(LaiFusionError, FloatingPointError):
    """A forward op produced NaN/Inf from finite inputs (debug mode only)."""


class DataCorruption(LaiFusionError, ValueError):
    """Input data holds values outside their legal domain (e.g. bad class index)."""


class DegenerateStatistics(LaiFusionError, ValueError):
    """Normalization statistics cannot be used (zero standard deviation)."""


class TilePackError(LaiFusionError):
    """Base class for on-disk container load failures."""


class VersionMismatch(TilePackError):
    pass


class TruncatedBlob(TilePackError):
    def __init__(self, field: str, expected: int, actual: int):
        super().__init__(f"blob {field!r} truncated: expected {expected} bytes, found {actual}")
        self.field = field


class SizeMismatch(TilePackError):
    def __init__(self, field: str, expected: int, actual: int):
        super().__init__(
            f"blob {field!r} disagrees with manifest: expected {expected} bytes, found {actual}"
        )
        self.field = field


class CheckpointMismatch(LaiFusionError, KeyError):
    """Parameter names or shapes in a checkpoint do not match the target model."""

    def __init__(self, message: str, missing=(), unexpected=(), bad_shapes=()):
        super().__init__(message)
        self.message = message
        self.missing = list(missing)
        self.unexpected = list(unexpected)
        self.bad_shapes = list(bad_shapes)

    def __str__(self):
        return self.message


class AllMaskedBatch(LaiFusionError, ValueError):
    """Every pixel of a batch is masked out; the caller should skip it."""


class UndefinedVariance(LaiFusionError, ValueError):
    """R² requested over targets with zero variance."""


class EmptySplit(LaiFusionError, ValueError):
    pass


class TrainingDivergence(LaiFusionError, FloatingPointError):
    def __init__(self, step: int, name: str = ""):
        where = f" in {name!r}" if name else ""
        super().__init__(f"non-finite gradient{where} at optimizer step {step}")
        self.step = step


class DegenerateDataset(LaiFusionError, ValueError):
    """A whole epoch consisted of fully masked batches."""


class DegenerateFeatures(LaiFusionError, ValueError):
    """The least-squares system is singular even after ridge jitter."""
