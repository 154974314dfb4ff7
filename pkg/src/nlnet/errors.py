"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class NumericError(ArithmeticError):
    """A computation produced or received NaN/Inf."""


class ConfigError(ValueError):
    """A configuration is invalid or inconsistent."""
