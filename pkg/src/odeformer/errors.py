"""Exception types shared across the package."""


class OdeformerError(Exception):
    """Base class for all package errors."""


class DimensionError(OdeformerError, ValueError):
    """Operand shapes are incompatible."""


class NumericalOverflowError(OdeformerError, ArithmeticError):
    """A computation produced NaN or Inf.

    ``stage`` and ``step`` locate the failure when known (RK stage index,
    integration step index, or the name of the primitive/parameter).
    """

    def __init__(self, message, stage=None, step=None):
        super().__init__(message)
        self.stage = stage
        self.step = step


class PrecisionFloorError(OdeformerError, ValueError):
    """Error too close to machine precision to estimate a convergence order."""


class DetachedGraphError(OdeformerError, RuntimeError):
    """backward() called on a tensor that was not produced by a recorded op."""


class StateError(OdeformerError, ValueError):
    """A history-consuming block variant was called without block state."""


class LengthError(OdeformerError, ValueError):
    """Sequence longer than the model's ``max_len``."""


class EmptyBatchError(OdeformerError, ValueError):
    """Every position of a batch is padding."""
