"""
Error types shared by all packages.

Library code raises these; the experiment commands map them to exit codes.
"""


class EopdError(Exception):
    """Base class for toolkit errors."""


class InvalidInputError(EopdError, ValueError):
    """An argument violates an operation's precondition."""


class DegenerateInputError(InvalidInputError):
    """The input leaves the output phase undefined (zero field)."""


class ConfigValidationError(InvalidInputError):
    """An experiment configuration failed validation."""


class NumericFailureError(EopdError, ArithmeticError):
    """A computation produced a non-finite value.

    The partial calibration report is kept on ``report``.
    """

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class LoopInstabilityError(EopdError, RuntimeError):
    """The synchronization loop diverged; ``trace`` holds the partial run."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace
