"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when arguments violate an operation's preconditions."""


class BufferFullError(RuntimeError):
    """Raised when eviction is required but every buffered sample is pinned."""


class NumericError(ArithmeticError):
    """Raised when a linear-algebra routine fails even after regularisation."""


class PlannerError(RuntimeError):
    """Raised when no sampled rollout produced a finite cost."""


class EpisodeAborted(RuntimeError):
    """Raised when the simulated vehicle stops making progress."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log
