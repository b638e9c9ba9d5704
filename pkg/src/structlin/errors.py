"""Exception types shared across the package."""


class StructlinError(Exception):
    """Base class for all package errors."""


class DimensionError(StructlinError, ValueError):
    pass


class DomainError(StructlinError, ValueError):
    pass


class ResourceError(StructlinError):
    pass


class NumericalError(StructlinError, ArithmeticError):
    """Iterative routine failed to converge."""

    def __init__(self, message: str, iterations: int):
        super().__init__(f"{message} (after {iterations} iterations)")
        self.iterations = iterations


class ConfigError(StructlinError, ValueError):
    """A configuration document is malformed or has unknown fields."""


class InsufficientDataError(StructlinError, ValueError):
    pass
