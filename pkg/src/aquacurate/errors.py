"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class AquaCurateError(Exception):
    exit_code = 2


class ParameterError(AquaCurateError, ValueError):
    exit_code = 1


class DimensionError(AquaCurateError, ValueError):
    pass


class FormatError(AquaCurateError, ValueError):
    pass


class EmptyCandidatesError(AquaCurateError, ValueError):
    pass


class PositivityError(AquaCurateError, ValueError):
    pass


class NormalizationError(AquaCurateError, ValueError):
    pass


class DegenerateAlignmentError(AquaCurateError, ArithmeticError):
    exit_code = 3


class KinkError(AquaCurateError, ArithmeticError):
    """Raised when an L1 residual sits on the non-differentiable point."""

    exit_code = 3

    def __init__(self, message, pixels=()):
        super().__init__(message)
        self.pixels = list(pixels)
