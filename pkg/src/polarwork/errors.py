"""Exception types shared across the package."""


class PolarworkError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PolarworkError, ValueError):
    """Shapes, layouts or settings that are inconsistent with each other."""


class InputError(PolarworkError, ValueError):
    """A caller supplied a value outside the accepted domain."""


class NumericError(PolarworkError, ArithmeticError):
    """Non-finite values or degenerate statistics."""


class UsageError(PolarworkError, RuntimeError):
    """An API was used out of order (for example a reused gradient tape)."""


class CheckpointError(PolarworkError):
    """A checkpoint file could not be parsed or validated."""


class TrainingDiverged(PolarworkError, RuntimeError):
    """Loss became NaN during training."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
