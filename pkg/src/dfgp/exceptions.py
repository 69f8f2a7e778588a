"""Exception types shared across the package."""


class InvalidFootprintError(ValueError):
    """A footprint references BAU indices outside the grid or masked cells."""


class StructureError(ValueError):
    """The spatial graph is unusable (e.g. an isolated BAU)."""


class InvalidParameterError(ValueError):
    """A model parameter is outside its admissible range."""


class FactorizationError(RuntimeError):
    """Sparse factorization failed; the matrix is not positive definite."""


class NumericalError(RuntimeError):
    """A numerical failure inside the state recursion.

    Carries ``time_index`` (1-based) identifying the offending step.
    """

    def __init__(self, message: str, time_index: int | None = None):
        if time_index is not None:
            message = f"{message} (time index {time_index})"
        super().__init__(message)
        self.time_index = time_index
