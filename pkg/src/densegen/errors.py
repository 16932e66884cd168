"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value violates its contract."""


class DataError(RuntimeError):
    """A dataset or observation does not match the expected layout."""


class NumericalError(RuntimeError):
    """Training produced a non-finite quantity and was aborted."""
