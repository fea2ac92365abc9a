class SensitivityError(Exception):
    """Base class for all package errors."""


class InvalidMarket(SensitivityError, ValueError):
    pass


class NonPositiveExponential(SensitivityError, ValueError):
    """An edge factor of the discrete stochastic exponential is <= 0."""


class PositivityViolation(SensitivityError, ValueError):
    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class Unbounded(SensitivityError):
    pass


class NonConvergence(SensitivityError):
    pass


class RiskToleranceMissing(SensitivityError):
    pass


class DegenerateIncrement(SensitivityError):
    pass


class ConfigError(SensitivityError):
    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class ToleranceFailure(SensitivityError):
    def __init__(self, failed):
        self.failed = list(failed)
        super().__init__("tolerance check(s) failed: " + ", ".join(self.failed))
