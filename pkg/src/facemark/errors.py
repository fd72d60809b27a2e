class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class NonFiniteLossError(RuntimeError):
    """Raised when a training step produces a NaN/Inf loss component."""

    def __init__(self, component, value):
        super().__init__(f"non-finite loss in component {component!r}: {value}")
        self.component = component
        self.value = value
