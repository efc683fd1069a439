"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument is outside its valid range."""


class ShapeError(ValueError):
    """Array shapes are incompatible."""


class StateError(RuntimeError):
    """An object is not in a state that allows the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced a degenerate or non-finite intermediate."""


class UnsupportedOperation(NotImplementedError):
    """The backend does not support the requested operation."""
