"""Exception types shared across the package."""


class PanelTrendsError(Exception):
    """Base class for all package errors."""


class SchemaError(PanelTrendsError):
    """Input data violates the long-format panel schema."""


class EstimatorError(PanelTrendsError):
    """An estimator's preconditions are not met by the data."""


class ConvergenceError(PanelTrendsError):
    """Iterative demeaning failed to converge.

    Carries the tolerance actually achieved so callers can decide whether
    the partial result is usable.
    """

    def __init__(self, message: str, achieved_tol: float):
        super().__init__(message)
        self.achieved_tol = achieved_tol


class BootstrapFailureError(PanelTrendsError):
    """Too many bootstrap replicates failed to produce a statistic."""
