class FreeBoundaryError(Exception):
    """Base class for every error raised by mini_fbp."""


class UnknownBuiltin(FreeBoundaryError):
    pass


class NonPositiveVolumeTarget(FreeBoundaryError):
    pass


class PeriodMismatch(FreeBoundaryError):
    pass


class NegativeU(FreeBoundaryError):
    pass


class NoWitnessFound(FreeBoundaryError):
    pass


class MarginViolation(FreeBoundaryError):
    pass


class Diverged(FreeBoundaryError):
    """Raised when the energy trace drops below the guard."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class NoProgress(FreeBoundaryError):
    pass


class LinearSolveFailure(FreeBoundaryError):
    pass


class BracketFailure(FreeBoundaryError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class BoxOverflow(FreeBoundaryError):
    pass


class InfeasiblePlan(FreeBoundaryError):
    pass


class NotPeriodic(FreeBoundaryError):
    pass


class EmptySupport(FreeBoundaryError):
    pass


class LambdaNonPositive(FreeBoundaryError):
    pass


class RadiiOutOfRange(FreeBoundaryError):
    pass


class NegativeOnSphere(FreeBoundaryError):
    pass


class NotSPD(FreeBoundaryError):
    pass


class OutOfBox(FreeBoundaryError):
    pass


class NotBoundaryPoint(FreeBoundaryError):
    pass


class FieldFormatError(FreeBoundaryError):
    pass


class ParseError(FreeBoundaryError):
    """Config file could not be parsed.

    Attributes:
        lineno (int | None): 1-based line of the offending text, when known.
    """

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class UnknownKey(ParseError):
    def __init__(self, section, key, suggestion=None, lineno=None):
        message = f"unknown key '{key}' in [{section}]"
        if suggestion:
            message += f" (did you mean '{suggestion}'?)"
        super().__init__(message, lineno=lineno)
        self.section = section
        self.key = key
        self.suggestion = suggestion


class Inadmissible(FreeBoundaryError):
    """The problem data failed an admissibility hypothesis and force was not set."""

    def __init__(self, message, failures=()):
        super().__init__(message)
        self.failures = list(failures)
