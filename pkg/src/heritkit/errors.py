"""Exception hierarchy shared by all heritkit modules."""


class HeritkitError(Exception):
    """Base class for data and model errors (CLI exit code 2)."""


class DataError(HeritkitError, ValueError):
    """Malformed, inconsistent or misaligned input data."""


class EstimabilityError(HeritkitError, ValueError):
    """Fixed effects that cannot be estimated from the design."""


class ModelError(HeritkitError, ArithmeticError):
    """Singular or otherwise unusable covariance structure."""


class ConvergenceError(HeritkitError, RuntimeError):
    """Iterative fit did not converge within its budget."""
