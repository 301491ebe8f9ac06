"""Exception types raised across the package."""

from __future__ import annotations


class StratarcError(Exception):
    """Base class for all package-specific errors."""


class MissingColumn(StratarcError):
    """A declared CSV column is absent from the header."""

    def __init__(self, column: str):
        self.column = column
        super().__init__(f"missing column: {column!r}")


class BadValue(StratarcError):
    """A CSV cell failed validation.

    Row numbers are 1-based and count data rows (the header is row 0).
    """

    def __init__(self, row: int, column: str, message: str = ""):
        self.row = row
        self.column = column
        detail = f": {message}" if message else ""
        super().__init__(f"bad value in row {row}, column {column!r}{detail}")


class EmptyDataset(StratarcError):
    """No usable data rows."""


class EmptyArm(StratarcError):
    """A required treatment arm has no records."""

    def __init__(self, arm: int, site_id: str | None = None):
        self.arm = arm
        self.site_id = site_id
        where = f" in site {site_id!r}" if site_id is not None else ""
        super().__init__(f"arm {arm} has no records{where}")


class TooFewSites(StratarcError):
    """Fewer sites than the operation requires."""


class RankDeficient(StratarcError):
    """Design matrix is rank deficient (or numerically near-singular)."""

    def __init__(self, columns, message: str = ""):
        self.columns = tuple(columns)
        detail = f" ({message})" if message else ""
        super().__init__(f"rank-deficient design, columns {list(self.columns)}{detail}")


class NoPhiVariation(StratarcError):
    """The complier-composition regressor is constant across sites."""


class ZeroVariance(StratarcError):
    """A covariate has zero variance where spread is required."""


class ZeroTotalMass(StratarcError):
    """A population-weighted average has zero total weight."""


class IncompatibleSpec(StratarcError):
    """The requested operation does not apply to this model specification."""


class BadLevel(StratarcError):
    """Confidence level outside (0, 1)."""


class AllReplicatesFailed(StratarcError):
    """Every bootstrap replicate failed to produce a fit."""


class BadSpec(StratarcError):
    """Invalid simulation scenario specification."""


class BadTemplate(StratarcError):
    """Template dataset unsuitable for the calibrated generator."""
