"""Exception types shared across the package."""


class RegHorizonError(Exception):
    pass


class NumericError(RegHorizonError, ArithmeticError):
    """A non-finite value was produced or consumed."""


class ConfigError(RegHorizonError, ValueError):
    pass


class UsageError(RegHorizonError, ValueError):
    pass


class DataError(RegHorizonError, ValueError):
    pass


class AnalysisError(RegHorizonError, ValueError):
    pass


class InsufficientDataError(AnalysisError):
    """Too few points survived selection to run the regression."""

    def __init__(self, count: int, needed: int):
        super().__init__(f"need at least {needed} over-regularized points, got {count}")
        self.count = count
        self.needed = needed
