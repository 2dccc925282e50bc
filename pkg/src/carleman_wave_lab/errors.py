"""Exception hierarchy shared by all modules.

The CLI maps these onto exit statuses, so every error carries enough context
to name the offending parameter.
"""


class LabError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(LabError, ValueError):
    """Invalid input: geometry, parameters, configuration or grid."""


class GeometryError(ValidationError):
    pass


class CFLError(ValidationError):
    pass


class InfeasibleWindowError(ValidationError):
    """The observation time T lies outside the admissible window."""


class SaturationError(LabError, ArithmeticError):
    """A log-space weight exceeds the configured exponent cap."""


class CheckFailure(LabError):
    """A verification ran to completion but its pass criterion failed."""


class CertificationError(CheckFailure):
    """No (beta, lambda) pair on the ladders gave positive coefficient minima."""

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class ObservabilityViolation(CheckFailure):
    pass


class NonFiniteError(CheckFailure):
    """Time stepping produced NaN or inf."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step
