"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ShapeError(DimensionError):
    """Spatial layout violates a divisibility or fold/unfold constraint."""


class ConfigurationError(ValueError):
    """A weight set, model spec or attention kind is inconsistent."""


class UsageError(ValueError):
    """Bad arguments to the benchmark / CLI layer."""
