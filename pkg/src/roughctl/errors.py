"""Exception types shared across the package."""


class RoughCtlError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(RoughCtlError, ValueError):
    """Raised for malformed inputs (bad grids, shape mismatches, bad counts)."""


class NumericalOverflowError(RoughCtlError, ArithmeticError):
    """A solver produced a non-finite state.

    Attributes
    ----------
    step : int or None
        Index of the elementary interval on which the overflow occurred.
    """

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class OutOfDomainError(RoughCtlError):
    """A state left the finite mesh it is being tracked on."""


class ResolutionError(RoughCtlError):
    """Sub-stepping needed to honour a CFL bound exceeded the configured cap."""


class FiniteEscapeError(NumericalOverflowError):
    """Riccati solution blew up before reaching the initial time."""
