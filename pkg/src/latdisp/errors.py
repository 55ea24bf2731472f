"""Exception types shared across the package."""


class LatdispError(Exception):
    """Base class for all package-specific errors."""


class InvalidInputError(LatdispError, ValueError):
    """Malformed or non-finite input data."""


class DomainError(LatdispError, ValueError):
    """Arguments outside the mathematical domain of an operation."""


class UnsupportedBoundaryError(LatdispError, ValueError):
    """Operation requires a periodic box."""


class ConvergenceError(LatdispError, RuntimeError):
    """An iteration failed to converge; carries the last iterate."""

    def __init__(self, message, last_estimate=None):
        super().__init__(message)
        self.last_estimate = last_estimate


class ExtrapolationError(LatdispError, RuntimeError):
    """Epsilon-extrapolation did not settle; carries the sequence tail."""

    def __init__(self, message, tail=None):
        super().__init__(message)
        self.tail = tail if tail is not None else []


class NearEigenvalueError(LatdispError, RuntimeError):
    """The finite-rank linear system is numerically singular."""

    def __init__(self, message, smallest_singular_value=None):
        super().__init__(message)
        self.smallest_singular_value = smallest_singular_value


class BoundaryCollisionError(LatdispError, RuntimeError):
    """An eigenvalue root landed on a search-interval endpoint."""


class ValidationError(LatdispError, ValueError):
    """A structural precondition on the inputs was violated."""


class IllConditionedFitError(LatdispError, RuntimeError):
    """Least-squares design matrix is rank deficient."""


class NonGenericError(LatdispError, RuntimeError):
    """The potential fails the genericity check at a critical value."""


class HypothesisViolationError(LatdispError, ValueError):
    """Parameters violate the hypothesis under which a statement holds."""


class BoxTooSmallError(LatdispError, ValueError):
    """Wrap-around cutoff leaves no usable fit window; suggests minimal L."""

    def __init__(self, message, suggested_half_width=None):
        super().__init__(message)
        self.suggested_half_width = suggested_half_width


class ConfigError(LatdispError, ValueError):
    """Experiment configuration is malformed."""
