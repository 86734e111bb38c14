"""Exception hierarchy shared by all solver modules."""

from __future__ import annotations


class PviError(Exception):
    """Base class for every error raised by the package."""


class EvaluationError(PviError):
    """A coefficient returned a non-finite value."""


class CatalogError(PviError, KeyError):
    """Unknown catalog name or missing/unknown parameter."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class SimulationError(PviError):
    pass


class InfeasibleDiscretizationError(PviError):
    pass


class ConditioningError(PviError):
    pass


class DivergenceError(PviError):
    pass


class StepSizeError(PviError):
    pass


class StabilityError(PviError):
    pass


class ShapeError(PviError):
    pass


class BoundaryError(PviError):
    pass


class GridError(PviError):
    """Grid mismatch or a grid too coarse for a residual stencil."""


class UnsupportedDiagnosticError(PviError):
    pass


class ConfigError(PviError):
    """Invalid experiment configuration; ``key`` names the offending entry."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message, key)
        self.key = key

    def __str__(self) -> str:
        return str(self.args[0])
