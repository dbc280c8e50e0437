"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand or array dimensions that do not line up."""


class ValidationError(ValueError):
    """Bad user-supplied data, configuration, or file contents."""
