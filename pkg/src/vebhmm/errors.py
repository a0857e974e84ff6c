"""Exception hierarchy shared by all modules."""


class VebError(Exception):
    """Base class for every error raised by vebhmm."""


class DomainError(VebError, ValueError):
    """An argument lies outside the domain of a function."""


class ConvergenceError(VebError, RuntimeError):
    """An iterative solver failed to reach its tolerance."""


class NumericError(VebError, ArithmeticError):
    """Underflow or another unrecoverable floating point failure."""


class DegenerateMomentError(VebError, ValueError):
    """Ensemble moments describe a collapsed state.

    Attributes
    ----------
    states : list of int
        Indices of the offending states.
    """

    def __init__(self, message, states=()):
        super().__init__(message)
        self.states = list(states)


class DataError(VebError, ValueError):
    """Malformed or invalid input data."""
