"""Exception types shared across the package.

Each class maps to one failure category; the CLI turns them into exit codes.
"""


class HmarlError(Exception):
    """Base class for all package errors."""


class InvalidArgument(HmarlError, ValueError):
    pass


class DegenerateGeometry(HmarlError, ValueError):
    pass


class EmptyFeasibleRegion(HmarlError, ValueError):
    pass


class ProtocolViolation(HmarlError, RuntimeError):
    pass


class InvalidAction(HmarlError, ValueError):
    pass


class UpdateRejected(HmarlError, FloatingPointError):
    """Raised when an optimizer step would write non-finite values."""


class NumericFailure(HmarlError, FloatingPointError):
    """Training produced non-finite losses that could not be recovered."""


class InvalidInput(HmarlError, ValueError):
    """Malformed scenario, trace or CSV input."""


class InvalidCheckpoint(HmarlError, ValueError):
    pass


class ReplayDivergence(HmarlError, AssertionError):
    def __init__(self, step: int, expected: float, got: float):
        super().__init__(f"replay diverged at step {step}: logged {expected!r}, recomputed {got!r}")
        self.step = step
        self.expected = expected
        self.got = got


class BudgetExceeded(HmarlError, RuntimeError):
    """Search stopped at its node cap; ``best`` holds the best result so far."""

    def __init__(self, message: str, best):
        super().__init__(message)
        self.best = best
