"""Exception types raised by mplnbicluster.

Every failure mode that callers are expected to handle gets its own class so
that scripts and the CLI can react to specific conditions instead of string
matching.  All of them derive from :class:`MplnError`.
"""

from __future__ import annotations


class MplnError(Exception):
    """Base class for all errors raised by this package."""


class NegativeCount(MplnError):
    """A count matrix cell is negative."""


class NonIntegerCount(MplnError):
    """A count matrix cell is not an integer."""


class ZeroLibrarySize(MplnError):
    """A sample has a zero row total, so library-size offsets are undefined."""


class NonpositiveOffset(MplnError):
    """An offset value is zero or negative."""


class LengthMismatch(MplnError):
    """Two inputs that must agree in length do not."""


class NotPositiveDefinite(MplnError):
    """A matrix required to be symmetric positive definite is not."""


class ZeroVariance(MplnError):
    """A covariance matrix has a zero diagonal entry, so correlations are undefined."""


class EmptyComponent(MplnError):
    """A mixture component has (numerically) no responsibility mass left."""


class AllRestartsFailed(MplnError):
    """Every restart of a fit raised; carries (restart index, reason) pairs."""

    def __init__(self, failures: list[tuple[int, str]]):
        self.failures = list(failures)
        detail = "; ".join(f"restart {r}: {msg}" for r, msg in self.failures)
        super().__init__(f"all {len(self.failures)} restarts failed ({detail})")


class AllCellsFailed(MplnError):
    """Every cell of a model-selection grid failed; carries (cell, reason) pairs."""

    def __init__(self, failures: list[tuple[str, str]]):
        self.failures = list(failures)
        detail = "; ".join(f"{cell}: {msg}" for cell, msg in self.failures)
        super().__init__(f"all {len(self.failures)} grid cells failed ({detail})")
