"""Exception types shared across the package."""


class ValidationError(ValueError):
    """A configuration or argument violates a documented precondition."""


class NumericalFailure(RuntimeError):
    """A computation failed numerically (divergence, NaN, zero pivot,
    non-converging iteration).  Carries enough context to locate the failure."""

    def __init__(self, message, *, step=None, diagnostics=None):
        super().__init__(message)
        self.step = step
        self.diagnostics = diagnostics or {}
