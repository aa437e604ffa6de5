"""Exception types raised across the package."""


class OccupationError(Exception):
    """Base class for all package errors."""


class InvalidParams(OccupationError, ValueError):
    pass


class NonFiniteState(OccupationError, FloatingPointError):
    """A simulated state or likelihood became NaN or infinite."""


class QuadratureFailure(OccupationError):
    pass


class UnstableSolve(OccupationError):
    """HJB values left the admissible probability range."""


class SingularTridiagonal(OccupationError):
    pass


class BadFit(OccupationError):
    pass


class DegenerateFit(OccupationError, ValueError):
    pass


class ScheduleExhausted(OccupationError):
    """The resolution schedule ended while the work was still decreasing."""

    def __init__(self, plan):
        super().__init__(f"schedule exhausted at P={plan.p_opt} while work still decreasing")
        self.plan = plan


class HypothesisViolation(OccupationError, ValueError):
    pass


class InvalidRates(OccupationError, ValueError):
    pass


class ConfigError(OccupationError, ValueError):
    pass
