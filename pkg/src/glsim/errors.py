"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class GLSimError(Exception):
    exit_code = 1


class ValidationError(GLSimError, ValueError):
    exit_code = 2


class ResolutionError(ValidationError):
    """Spatial resolution too small for the requested operation."""


class WindowError(ValidationError):
    """Time window not aligned with, or outside, the trajectory step grid."""


class BlowUpError(GLSimError, FloatingPointError):
    """Raised by the blow-up guard; ``dump`` holds the offending state summary."""

    exit_code = 3

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class BudgetExhausted(GLSimError):
    exit_code = 4

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class RecombinationError(GLSimError, ArithmeticError):
    """The phase-triple system has no exact solution within tolerance."""
