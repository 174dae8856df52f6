"""Exception hierarchy shared by all modules."""


class IntervalMPCError(Exception):
    """Base class for every error raised by this package."""


class StructuralError(IntervalMPCError, ValueError):
    """Matrix or vector dimensions are inconsistent."""


class DomainError(IntervalMPCError, ValueError):
    """An argument lies outside its admissible domain."""


class DivergenceError(IntervalMPCError, ArithmeticError):
    """A simulated state left the finite range.

    ``last_time`` is the last grid time at which the state was still finite
    and below the divergence threshold; ``partial`` optionally carries the
    trajectory computed up to that time.
    """

    def __init__(self, message, last_time, partial=None):
        super().__init__(message)
        self.last_time = last_time
        self.partial = partial


class PEFailure(IntervalMPCError):
    """The regressor is not persistently exciting on some window."""

    def __init__(self, message, window):
        super().__init__(message)
        self.window = window


class ExcitationError(IntervalMPCError, ArithmeticError):
    """The accumulated Gramian is too ill-conditioned to invert."""


class ContractError(IntervalMPCError):
    """A documented precondition of an operation was violated."""


class SynthesisFailure(IntervalMPCError):
    """The gain search ran out of budget without a certificate."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class ControllerFault(IntervalMPCError):
    """Neither a feasible plan nor terminal-set membership is available."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log


class ConfigError(IntervalMPCError, ValueError):
    """A configuration document failed to parse or validate."""
