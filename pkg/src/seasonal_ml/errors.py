"""Exception hierarchy shared by all modules."""


class ForecastError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(ForecastError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GridMismatchError(ForecastError, ValueError):
    pass


class DuplicationError(ForecastError, ValueError):
    pass


class IncompleteSeasonError(ForecastError, ValueError):
    def __init__(self, year, month):
        self.year = year
        self.month = month
        super().__init__(f"season incomplete: year {year} lacks month {month}")


class ConfigurationError(ForecastError, ValueError):
    pass


class GeometryError(ForecastError, ValueError):
    pass


class InsufficientClimatologyError(ForecastError, ValueError):
    pass


class DegenerateIndexError(ForecastError, ValueError):
    pass


class ProjectionError(ForecastError, ValueError):
    pass


class ValidationError(ForecastError, ValueError):
    pass


class FeatureMismatchError(ForecastError, ValueError):
    pass


class DomainError(ForecastError, ValueError):
    pass


class NumericalError(ForecastError, ArithmeticError):
    pass


class ConvergenceError(ForecastError, RuntimeError):
    """Raised when block coordinate descent fails to certify optimality.

    ``residual`` holds the largest subgradient-optimality violation seen
    at the final iterate.
    """

    def __init__(self, message, residual, sweeps):
        self.residual = residual
        self.sweeps = sweeps
        super().__init__(f"{message} (residual={residual:.3e}, sweeps={sweeps})")
