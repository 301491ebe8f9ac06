"""Residual-based checks of the cross-site identifying assumption.

The identifying assumption implies the site-level regression errors are
mean zero and linearly unrelated to the complier composition. We report
internally studentized residuals and the slope of their best-fit line
against the composition regressor; a slope large relative to its robust
standard error flags a violation. Heteroskedasticity is reported
descriptively only, because the assumption restricts the mean of the
errors, not their spread.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .errors import TooFewSites
from .regression import FitResult, ols_fit
from .strata import SiteMoments


@dataclass(frozen=True)
class SlopeTest:
    slope: float
    slope_se: float
    z_value: float
    reject: bool

    def to_dict(self) -> dict:
        return {"slope": self.slope, "slope_se": self.slope_se,
                "z_value": self.z_value, "reject": self.reject}


def residual_slope_test(values: np.ndarray, phi: np.ndarray,
                        alpha: float = 0.05) -> SlopeTest:
    """Best-fit slope of residual-like values on phi, with an hc1 z-test."""
    values = np.asarray(values, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    X = np.column_stack([np.ones_like(phi), phi])
    fit = ols_fit(X, values, hc="hc1", column_names=["intercept", "phi"])
    slope = float(fit.coef[1])
    se = float(np.sqrt(fit.vcov[1, 1]))
    z = slope / se if se > 0 else float("inf") if slope != 0 else 0.0
    crit = float(sps.norm.ppf(1.0 - alpha / 2.0))
    return SlopeTest(slope=slope, slope_se=se, z_value=float(z),
                     reject=bool(abs(z) > crit))


@dataclass(frozen=True)
class ResidualDiagnostics:
    """Studentized residuals and the composition slope test."""

    studentized: np.ndarray
    slope: float
    slope_se: float
    z_value: float
    violation: bool
    mean_residual: float
    heteroskedasticity_note: str
    studentization: str = "internal"

    def to_dict(self) -> dict:
        return {
            "slope": self.slope,
            "slope_se": self.slope_se,
            "z_value": self.z_value,
            "violation": self.violation,
            "mean_residual": self.mean_residual,
            "heteroskedasticity_note": self.heteroskedasticity_note,
            "studentization": self.studentization,
            "studentized": [float(v) for v in self.studentized],
        }


def studentized_residuals(result: FitResult) -> np.ndarray:
    """Internally studentized residuals e_j / (s * sqrt(1 - h_jj))."""
    X = result.design
    e = result.residuals
    k, p = X.shape
    if k <= p:
        raise TooFewSites("no residual degrees of freedom")
    w = result.weights_used if result.weights_used is not None else np.ones(k)
    bread = np.linalg.inv((X * w[:, None]).T @ X)
    leverage = np.einsum("ij,jk,ik->i", X, bread, X) * w
    s2 = float((w * e ** 2).sum() / (k - p))
    denom = np.sqrt(np.clip(1.0 - leverage, 1e-12, None)) * np.sqrt(s2)
    return e / denom


def residual_diagnostics(result: FitResult, alpha: float = 0.05) -> ResidualDiagnostics:
    """Studentize the fit's residuals and test their slope against phi.

    Requires more sites than coefficients plus one, so the auxiliary
    slope regression has residual degrees of freedom of its own.
    """
    k, p = result.design.shape
    if k <= p + 1:
        raise TooFewSites(
            f"{k} sites cannot support diagnostics for a {p}-coefficient model"
        )
    student = studentized_residuals(result)
    test = residual_slope_test(student, result.phi, alpha=alpha)
    med = float(np.median(result.phi))
    lo = student[result.phi <= med]
    hi = student[result.phi > med]
    note = (
        f"studentized residual sd {np.std(lo):.3f} for phi <= {med:.3f} vs "
        f"{np.std(hi):.3f} above (descriptive only)"
        if len(lo) >= 2 and len(hi) >= 2
        else "too few sites per bin for a spread comparison"
    )
    return ResidualDiagnostics(
        studentized=student,
        slope=test.slope,
        slope_se=test.slope_se,
        z_value=test.z_value,
        violation=test.reject,
        mean_residual=float(np.mean(result.residuals)),
        heteroskedasticity_note=note,
    )


PLOT_COLUMNS = ("site_id", "phi_hat", "late_hat", "complier_mass",
                "studentized_residual", "fitted")


def plot_data(diagnostics: ResidualDiagnostics, result: FitResult,
              moments: list[SiteMoments] | None = None) -> list[dict]:
    """Tabular artifact sufficient to draw the scatter and residual plots."""
    mass = result.complier_mass
    if moments is not None:
        by_id = {m.site_id: m for m in moments}
        mass = np.array([by_id[s].complier_mass for s in result.site_ids])
    rows = []
    for i, sid in enumerate(result.site_ids):
        rows.append({
            "site_id": sid,
            "phi_hat": float(result.phi[i]),
            "late_hat": float(result.response[i]),
            "complier_mass": float(mass[i]),
            "studentized_residual": float(diagnostics.studentized[i]),
            "fitted": float(result.fitted[i]),
        })
    return rows


def write_plot_data(rows: list[dict], path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=PLOT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (row[k] if k == "site_id" else repr(row[k]))
                             for k in PLOT_COLUMNS})
