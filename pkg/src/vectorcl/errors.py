"""Exception hierarchy shared across the package."""


class VectorCLError(Exception):
    """Base class for all package errors."""


class ParameterDomainError(VectorCLError, ValueError):
    pass


class MatrixDomainError(VectorCLError, ValueError):
    pass


class ShapeError(VectorCLError, ValueError):
    pass


class ConfigurationError(VectorCLError, ValueError):
    pass


class NumericDomainError(VectorCLError, ValueError):
    pass


class DegenerateTransformError(VectorCLError, RuntimeError):
    """Raised when a validity mask has no valid pixel."""


class DataDomainError(VectorCLError, RuntimeError):
    pass


class IngestionError(VectorCLError, OSError):
    pass


class ContainerError(VectorCLError, ValueError):
    """Malformed or corrupted tensor/checkpoint container."""
