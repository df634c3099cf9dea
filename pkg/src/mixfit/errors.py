"""Exception hierarchy.

Numerical failures (:class:`NumericalError` subclasses) map to CLI exit code 2,
configuration and input problems to exit code 1.
"""


class MixfitError(Exception):
    """Base class for all package errors."""


class ConfigError(MixfitError, ValueError):
    """Invalid configuration or arguments."""


class ParseError(MixfitError, ValueError):
    """Malformed input file."""

    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.column = column


class NumericalError(MixfitError, ArithmeticError):
    """A computation produced an unusable numerical state."""


class DomainError(NumericalError):
    """An elementary function was evaluated outside its domain."""


class SingularCovarianceError(NumericalError):
    """A covariance matrix could not be factorized, even after jitter."""


class DegenerateMarginalError(NumericalError):
    """A component has (numerically) zero marginal standard deviation."""


class RankDeficiencyError(NumericalError):
    """EM needs a full-rank scatter matrix and did not get one (e.g. n <= p)."""


class DivergenceError(NumericalError):
    """The objective became non-finite during optimization.

    ``best_x`` holds the best parameter vector seen before the failure and
    ``trace`` the iterations recorded so far.
    """

    def __init__(self, message, best_x=None, trace=None):
        super().__init__(message)
        self.best_x = best_x
        self.trace = trace


class RestartsExhaustedError(NumericalError):
    """Every random restart of a fit failed."""
