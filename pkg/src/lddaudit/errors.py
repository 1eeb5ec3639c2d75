"""Exception types raised across the package."""


class AuditError(Exception):
    """Base class for every error raised by lddaudit."""


class InvalidArgument(AuditError, ValueError):
    pass


class InvalidPrompt(InvalidArgument):
    pass


class ShapeError(AuditError, ValueError):
    pass


class InvalidK(InvalidArgument):
    pass


class InvalidDecision(InvalidArgument):
    pass


class AlignmentError(AuditError):
    def __init__(self, step_index: int, message: str = ""):
        self.step_index = step_index
        super().__init__(f"alignment failed at step {step_index}" + (f": {message}" if message else ""))


class UnsupportedScheme(AuditError):
    pass


class ModeError(AuditError):
    pass


class TooLarge(InvalidArgument):
    pass


class TopKIndexError(AuditError, IndexError):
    pass


class EmptyTrace(AuditError, ValueError):
    pass


class CalibrationInfeasible(AuditError):
    pass


class InsufficientTail(AuditError):
    pass


class BelowThreshold(InvalidArgument):
    pass


class Infeasible(AuditError):
    pass


class AuditUnavailable(AuditError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return Exception.__str__(self)


class DuplicateId(AuditError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class ProbeError(AuditError):
    """Transport failure between auditor and server; safe to retry."""
