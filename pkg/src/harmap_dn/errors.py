"""Exception hierarchy shared by all modules."""


class HarmapError(Exception):
    """Base class for every error raised by this package."""


class ExpressionSyntaxError(HarmapError, ValueError):
    def __init__(self, message, position):
        super().__init__(f"{message} at offset {position}")
        self.position = position


class UnknownIdentifierError(HarmapError, ValueError):
    def __init__(self, name, position):
        super().__init__(f"unknown identifier {name!r} at offset {position}")
        self.name = name
        self.position = position


class SingularMetricError(HarmapError, ValueError):
    pass


class OrderExceededError(HarmapError, ValueError):
    pass


class InvalidFieldError(HarmapError, ValueError):
    pass


class RangeEscapeError(HarmapError):
    pass


class NoConvergenceError(HarmapError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class SolverFailureError(HarmapError):
    pass


class IncompleteTableError(HarmapError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "incomplete linearization table"


class MissingJetError(HarmapError, ValueError):
    pass


class StepTooLargeError(HarmapError):
    pass


class IllConditionedMetricError(HarmapError, ValueError):
    pass


class DegenerateProbeError(HarmapError, ValueError):
    pass


class JetMismatchError(HarmapError, ValueError):
    pass


class NoiseFloorError(HarmapError):
    pass


class ConfigError(HarmapError, ValueError):
    pass
