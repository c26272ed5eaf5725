"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ValidationError(ValueError):
    """A configuration or user input failed validation."""


class NumericError(RuntimeError):
    """A numeric invariant was violated (NaN/Inf, divergence)."""


class UndefinedMetricError(ValueError):
    """A surface metric was requested for an empty region."""
