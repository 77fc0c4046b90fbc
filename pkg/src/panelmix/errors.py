"""Exception hierarchy for the panelmix package.

All library-raised errors derive from PanelMixError so callers can catch one
type at the boundary.  Numerical failures carry enough context to diagnose
which component or parameter block went bad.
"""


class PanelMixError(Exception):
    """Base class for all panelmix errors."""


class DataError(PanelMixError):
    """Malformed input data (CSV schema, duplicates, non-numeric columns)."""


class DimensionError(PanelMixError):
    """Shape mismatch between data and parameters."""


class InfeasibleConstraintError(PanelMixError):
    """Constraint set admits no valid parameter point."""


class DegenerateComponentError(PanelMixError):
    """A mixture component lost all posterior mass during estimation."""


class NonConvergenceError(PanelMixError):
    """No EM restart reached the convergence tolerance.

    The best partial result (highest log-likelihood run) is attached as
    ``best_partial`` so callers can inspect or continue from it.
    """

    def __init__(self, message, best_partial=None):
        super().__init__(message)
        self.best_partial = best_partial


class UnsupportedModelError(PanelMixError):
    """Requested operation is not implemented for this model class."""


class DegeneratePartitionError(PanelMixError):
    """A discretization cell is empty or a partition has fewer than 2 cells."""


class IllConditionedError(PanelMixError):
    """A matrix required to be invertible is numerically singular."""


class OptimizationFailureError(PanelMixError):
    """An optimizer returned an invalid result (e.g. negative LRT statistic
    that refitting could not repair)."""
