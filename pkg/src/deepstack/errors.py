"""Exception hierarchy shared across the package."""


class DeepStackError(Exception):
    """Base class for every error raised by deepstack."""


class ConfigError(DeepStackError, ValueError):
    """Invalid configuration value, key, or combination."""


class DimensionError(DeepStackError, ValueError):
    """Tensor shapes do not agree."""


class ContractError(DeepStackError, RuntimeError):
    """An operation was called outside its documented preconditions."""


class LifecycleError(ContractError):
    """An operation was invoked at the wrong point in a model's life."""


class NonFiniteError(DeepStackError, ArithmeticError):
    """A forward op produced NaN or Inf."""


class DivergenceError(DeepStackError, ArithmeticError):
    """Training diverged (non-finite gradients or loss)."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DeterminismError(DeepStackError, RuntimeError):
    """A function expected to be deterministic returned different values."""


class DataError(DeepStackError, ValueError):
    """Input data is empty, too short, or malformed."""


class CheckpointError(DeepStackError, OSError):
    """A checkpoint file is truncated or has the wrong magic or version."""


class UndefinedMeanError(DeepStackError, ValueError):
    """Every position of a loss was ignored, so its mean is undefined."""
