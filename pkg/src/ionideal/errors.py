"""Exception hierarchy shared by all modules.

The CLI maps each class onto a process exit code.
"""


class IdealizationError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InputError(IdealizationError, ValueError):
    """Invalid user input, configuration or file content."""

    exit_code = 2


class CalibrationError(IdealizationError):
    """Monte-Carlo calibration could not reach the requested level.

    ``achieved`` is the level of the closest attainable thresholds and
    ``q`` those thresholds, when known.
    """

    exit_code = 3

    def __init__(self, message: str, achieved: float | None = None, q=None):
        super().__init__(message)
        self.achieved = achieved
        self.q = q


class NumericalError(IdealizationError, ArithmeticError):
    """A numerical routine failed (non-convergence, singular system)."""

    exit_code = 4
