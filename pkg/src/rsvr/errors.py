"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


class ConstructionError(ValueError):
    """A model object could not be built from the given data."""


class EstimationError(ValueError):
    """Probability estimation had no usable transitions."""


class SolverError(RuntimeError):
    """The conic backend or the CCCP driver failed."""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class BaselineError(RuntimeError):
    """A baseline scheme is not applicable to the instance (e.g. ZF with K > M)."""


class QuantizationError(RuntimeError):
    """Rounding produced a plan better than its continuous source."""
