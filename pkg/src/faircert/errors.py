"""Exception types raised across faircert."""


class FaircertError(Exception):
    """Base class for all faircert errors."""


class DimensionError(FaircertError, ValueError):
    """Array shapes do not compose."""


class UnsupportedOpError(FaircertError, TypeError):
    """A loss or operation is not registered with the gradient engine."""


class ConvergenceError(FaircertError, RuntimeError):
    """An iterative fit did not reach its tolerance."""


class BudgetError(FaircertError, ValueError):
    """A requested computation exceeds the configured compute budget."""


class ValidationError(FaircertError, ValueError):
    """Input data or configuration is malformed."""


class DivergenceError(FaircertError, RuntimeError):
    """Training produced a non-finite loss; ``log`` holds the epochs completed so far."""

    def __init__(self, message: str, log=None):
        super().__init__(message)
        self.log = list(log or [])
