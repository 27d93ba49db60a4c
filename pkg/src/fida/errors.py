"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes, so each class carries the code it
should produce when it escapes a subcommand.
"""


class FidaError(Exception):
    exit_code = 1


class ConfigError(FidaError, ValueError):
    exit_code = 2


class PreconditionError(FidaError, ValueError):
    """A numerical precondition (CFL bound, input shape) does not hold."""

    exit_code = 3


class DomainError(FidaError, ValueError):
    exit_code = 3


class BlowUpError(FidaError, ArithmeticError):
    """Integration left the overflow guard; ``time`` is when it happened."""

    exit_code = 3

    def __init__(self, time, message=None):
        self.time = float(time)
        super().__init__(message or f"state diverged at t={self.time:.6g}")


class KindMismatchError(FidaError, ValueError):
    exit_code = 2


class EmptySetError(FidaError, ValueError):
    exit_code = 4


class CardinalityError(FidaError, ValueError):
    exit_code = 3


class InsufficientDataError(FidaError, ValueError):
    exit_code = 5


class EstimationError(FidaError, RuntimeError):
    exit_code = 5
