"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class InvalidInput(ValueError):
    pass


class PaletteExhausted(ValueError):
    pass


class NumericFailure(RuntimeError):
    """Raised when a state or loss becomes NaN/Inf.

    ``step`` is the solver step (or training step) where it was detected and
    ``checkpoint`` optionally carries the last good training state.
    """

    def __init__(self, message, step=None, checkpoint=None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


class InvalidState(RuntimeError):
    pass


class FormatError(ValueError):
    pass


class DataError(ValueError):
    pass


class ConfigMismatch(ValueError):
    """Checkpoint metadata disagrees with what the caller expects."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
