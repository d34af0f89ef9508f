"""Exception types shared across the package."""


class KoopmanError(Exception):
    """Base class for all errors raised by ``altkoop``."""


class DomainError(KoopmanError, ValueError):
    """An input lies outside the domain of a function (e.g. non-finite)."""


class ShapeError(KoopmanError, ValueError):
    """Array dimensions are inconsistent."""


class UsageError(KoopmanError, ValueError):
    """An argument or configuration value is invalid."""


class DivergenceError(KoopmanError, ArithmeticError):
    """Training or propagation produced non-finite values.

    Attributes
    ----------
    iteration : int
        Iteration (or step) at which the non-finite value was detected.
    history : list
        Partial history collected before the failure, if any.
    """

    def __init__(self, message, iteration=None, history=None):
        super().__init__(message)
        self.iteration = iteration
        self.history = history if history is not None else []


class IntegrationError(DivergenceError):
    """The ODE integrator produced a non-finite state."""


class ProtocolError(KoopmanError, RuntimeError):
    """A distributed node is missing a message it requires."""
