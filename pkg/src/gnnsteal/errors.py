"""Exception hierarchy shared by every stage."""

from __future__ import annotations


class GnnStealError(Exception):
    """Base class for all errors raised by this package."""


class IngestionError(GnnStealError):
    """A bundle file is missing or unreadable."""


class ValidationError(GnnStealError):
    """Input data or configuration violates a documented contract."""


class ShapeError(ValidationError):
    """Matrix or feature dimensions do not line up."""


class BudgetExceededError(GnnStealError):
    """The oracle's query budget cannot cover the requested batch."""

    def __init__(self, requested: int, used: int, budget: int):
        self.requested = requested
        self.used = used
        self.budget = budget
        super().__init__(
            f"query of {requested} nodes exceeds budget ({used}/{budget} already used)"
        )


class SpectralAugmentError(GnnStealError):
    """Spectral augmentation could not reach a positive optimal-pair margin."""

    def __init__(self, best_margin: float, message: str | None = None):
        self.best_margin = best_margin
        super().__init__(message or f"no positive spectral margin (best {best_margin:.3g})")
