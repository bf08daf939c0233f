"""Error types raised by the library.

Every error carries a human-readable ``detail`` plus a ``context`` dict with
the indices needed to locate the failure (step, epoch, batch, row, layer).
"""
from typing import Any, Dict


class RSSError(Exception):
    """Base class for all library errors."""

    def __init__(self, detail: str, **context: Any):
        super().__init__(detail)
        self.detail = detail
        self.context: Dict[str, Any] = context

    def __str__(self) -> str:
        if not self.context:
            return self.detail
        extras = ", ".join(f"{key}={value}" for key, value in self.context.items())
        return f"{self.detail} ({extras})"


class InvalidSpecError(RSSError, ValueError):
    """Mixture specification is inconsistent (non-SPD covariance, shift too large, bad shapes)."""


class DimensionMismatchError(RSSError, ValueError):
    """Model and data widths disagree."""


class NonUnitThetaError(RSSError, ValueError):
    """A closed form or analytic risk was called with a zero or non-unit direction."""


class InnerSolverDivergenceError(RSSError):
    """Adversarial ascent left the radius cap: the inner problem is not concave enough."""


class NumericError(RSSError):
    """NaN or infinity appeared in a gradient or forward pass."""


class TrainingDivergenceError(RSSError):
    """Training objective became NaN or infinite."""


class DegenerateSpectrumError(RSSError):
    """Second-moment matrix is zero, power iteration has nothing to find."""


class DegenerateGapError(RSSError):
    """Covariance has no gap between distinct eigenvalues."""


class IngestionError(RSSError, ValueError):
    """Malformed embedding or dataset CSV."""


class SearchError(RSSError):
    """Every random-search trial failed."""
