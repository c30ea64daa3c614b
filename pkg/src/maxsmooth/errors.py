"""Exception types shared across the package."""


class MaxSmoothError(Exception):
    """Base class for package-specific failures."""


class DimensionMismatchError(MaxSmoothError):
    """Operands have incompatible dimensions."""


class NotPositiveDefiniteError(MaxSmoothError):
    """A Cholesky pivot failed; carries the (permuted) column index."""

    def __init__(self, column, message=None):
        self.column = int(column)
        super().__init__(message or f"matrix not positive definite at column {column}")


class DegenerateLikelihoodError(MaxSmoothError):
    """A group likelihood carries no usable information (e.g. all-zero data)."""


class MaxIterationsError(MaxSmoothError):
    """An iterative optimizer hit its iteration cap before converging."""


class NonConcaveAtModeError(MaxSmoothError):
    """The Hessian at the stopping point of an optimization is not negative definite."""


class NonFiniteObjectiveError(MaxSmoothError):
    """An objective evaluated to NaN or infinity during optimization."""


class DataFormatError(MaxSmoothError):
    """Structured input (CSV/JSON) violates its schema; message carries location."""
