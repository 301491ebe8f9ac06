"""Cross-site regressions recovering principal causal effects.

The response is a per-site effect estimate and the regressors encode the
site's complier composition. Uncertainty uses heteroskedasticity-robust
(sandwich) covariances; effect estimates and their standard errors are
always read off the fit through linear functionals of the coefficient
vector, so the three equivalent parameterizations of the complier
decomposition give identical answers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import (
    IncompatibleSpec,
    NoPhiVariation,
    RankDeficient,
    TooFewSites,
    ZeroTotalMass,
)
from .strata import SiteMoments, StratumTable, StudyDataset, moments_to_arrays
from . import strata as _strata

#: condition-number threshold on the scaled Gram matrix
CONDITION_LIMIT = 1e10


class ModelKind(str, Enum):
    LATE_UNADJUSTED = "unadjusted"
    LATE_ADJUSTED = "adjusted"
    LATE_INTERACTION = "interaction"
    ITT = "itt"


class Parameterization(str, Enum):
    TWO_SLOPE = "two-slope"            # zero intercept: one column per complier type
    INTERCEPT_PHI = "intercept-phi"    # free intercept plus phi
    INTERCEPT_PHI_COMP = "intercept-phic"  # free intercept plus (1 - phi)


LATE_MODELS = (ModelKind.LATE_UNADJUSTED, ModelKind.LATE_ADJUSTED,
               ModelKind.LATE_INTERACTION)


@dataclass(frozen=True)
class DesignSpec:
    """What to fit: model family, parameterization, and covariate roles."""

    model: ModelKind = ModelKind.LATE_UNADJUSTED
    parameterization: Parameterization = Parameterization.TWO_SLOPE
    covariate_names: tuple[str, ...] = ()
    interaction_covariate: str | None = None
    center: bool = True

    def __post_init__(self):
        model = ModelKind(self.model)
        param = Parameterization(self.parameterization)
        object.__setattr__(self, "model", model)
        object.__setattr__(self, "parameterization", param)
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        if self.interaction_covariate is not None and model is not ModelKind.LATE_INTERACTION:
            raise IncompatibleSpec("interaction_covariate requires the interaction model")
        if model is ModelKind.LATE_INTERACTION:
            names = self.covariate_names
            if not names:
                raise IncompatibleSpec("interaction model needs at least one covariate")
            inter = self.interaction_covariate or names[0]
            if inter not in names:
                raise IncompatibleSpec(
                    f"interaction covariate {inter!r} not among covariates {list(names)}"
                )
            object.__setattr__(self, "interaction_covariate", inter)
        if model is ModelKind.ITT and param is not Parameterization.TWO_SLOPE:
            raise IncompatibleSpec("the ITT-response model has no reparameterized form")
        if model is ModelKind.LATE_UNADJUSTED and self.covariate_names:
            raise IncompatibleSpec("unadjusted model takes no covariates")


@dataclass(frozen=True)
class Estimate:
    value: float
    se: float

    def to_dict(self) -> dict:
        return {"value": self.value, "se": self.se}


@dataclass(frozen=True)
class OlsFit:
    coef: np.ndarray
    vcov: np.ndarray
    residuals: np.ndarray
    fitted: np.ndarray
    dof: int


def ols_fit(X: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None,
            hc: str = "hc1", column_names: Sequence[str] | None = None) -> OlsFit:
    """Weighted least squares with a sandwich covariance.

    hc0: bread @ (sum of (w e)^2 x x') @ bread; hc1 multiplies by
    K/(K - p). With K == p the fit interpolates exactly (zero residuals)
    and the covariance is the zero matrix. Raises RankDeficient for zero
    or near-collinear columns and TooFewSites when K < p.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    k, p = X.shape
    names = list(column_names) if column_names is not None else [f"x{j}" for j in range(p)]
    if k < p:
        raise TooFewSites(f"{k} rows cannot identify {p} coefficients")
    if hc.lower() not in ("hc0", "hc1"):
        raise ValueError(f"unknown hc variant {hc!r}")
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)

    norms = np.sqrt((w[:, None] * X * X).sum(axis=0))
    dead = [names[j] for j in range(p) if norms[j] == 0]
    if dead:
        raise RankDeficient(dead, "zero column")
    Xs = X / norms
    gram_scaled = (Xs * w[:, None]).T @ Xs
    cond = np.linalg.cond(gram_scaled)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise RankDeficient(names, f"condition number {cond:.3g}")

    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    fitted = X @ coef
    resid = y - fitted
    bread = np.linalg.inv((X * w[:, None]).T @ X)
    s = X * (w * resid)[:, None]
    vcov = bread @ (s.T @ s) @ bread
    vcov = (vcov + vcov.T) / 2.0
    dof = k - p
    if hc.lower() == "hc1" and dof > 0:
        # K == p is exact interpolation: residuals are zero and so is hc0
        vcov = vcov * (k / dof)
    return OlsFit(coef=coef, vcov=vcov, residuals=resid, fitted=fitted, dof=dof)


# ---------------------------------------------------------------------------
# design construction

def _stratum_columns(param: Parameterization, phi: np.ndarray):
    if param is Parameterization.TWO_SLOPE:
        return [1.0 - phi, phi], ["beta_lc", "beta_hc"]
    if param is Parameterization.INTERCEPT_PHI:
        return [np.ones_like(phi), phi], ["intercept", "phi"]
    return [np.ones_like(phi), 1.0 - phi], ["intercept", "one_minus_phi"]


def _interaction_columns(param: Parameterization, phi: np.ndarray, w1: np.ndarray,
                         name: str):
    if param is Parameterization.TWO_SLOPE:
        return [(1.0 - phi) * w1, phi * w1], [f"lc:{name}", f"hc:{name}"]
    if param is Parameterization.INTERCEPT_PHI:
        return [w1, phi * w1], [name, f"phi:{name}"]
    return [w1, (1.0 - phi) * w1], [name, f"one_minus_phi:{name}"]


def _effect_functionals(param: Parameterization, p: int) -> dict[str, np.ndarray]:
    """Linear functionals a with effect = a'b, evaluated at centered covariates."""
    a_lc = np.zeros(p)
    a_hc = np.zeros(p)
    if param is Parameterization.TWO_SLOPE:
        a_lc[0] = 1.0
        a_hc[1] = 1.0
    elif param is Parameterization.INTERCEPT_PHI:
        a_lc[0] = 1.0
        a_hc[0] = 1.0
        a_hc[1] = 1.0
    else:
        a_hc[0] = 1.0
        a_lc[0] = 1.0
        a_lc[1] = 1.0
    return {"itt_lc": a_lc, "itt_hc": a_hc, "contrast": a_hc - a_lc}


def _stratum_block_matrix(src: Parameterization, dst: Parameterization) -> np.ndarray:
    """2x2 coefficient map for the complier block (and interaction block)."""
    to_two = {
        Parameterization.TWO_SLOPE: np.eye(2),
        Parameterization.INTERCEPT_PHI: np.array([[1.0, 0.0], [1.0, 1.0]]),
        Parameterization.INTERCEPT_PHI_COMP: np.array([[1.0, 1.0], [1.0, 0.0]]),
    }
    from_two = {
        Parameterization.TWO_SLOPE: np.eye(2),
        Parameterization.INTERCEPT_PHI: np.array([[1.0, 0.0], [-1.0, 1.0]]),
        Parameterization.INTERCEPT_PHI_COMP: np.array([[0.0, 1.0], [1.0, -1.0]]),
    }
    return from_two[dst] @ to_two[src]


@dataclass(frozen=True)
class FitResult:
    """A fitted cross-site regression plus derived effect estimates.

    `effects` holds itt_lc, itt_hc, and their contrast with standard
    errors from the full covariance quadratic form. The design matrix and
    inputs are retained for diagnostics, reparameterization, and
    population reweighting.
    """

    spec: DesignSpec
    hc: str
    coef_names: tuple[str, ...]
    coef: np.ndarray
    vcov: np.ndarray
    residuals: np.ndarray
    fitted: np.ndarray
    effects: dict[str, Estimate]
    dof: int
    site_ids: tuple[str, ...]
    phi: np.ndarray
    design: np.ndarray
    response: np.ndarray
    weights_used: np.ndarray | None
    complier_mass: np.ndarray
    centered_covs: np.ndarray           # columns ordered as cov_order
    cov_order: tuple[str, ...]
    grand_means: dict[str, float]

    @property
    def n_sites(self) -> int:
        return len(self.site_ids)

    @property
    def coefficients(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.coef_names, self.coef)}

    def standard_errors(self) -> dict[str, float]:
        return {n: float(np.sqrt(self.vcov[j, j]))
                for j, n in enumerate(self.coef_names)}

    def to_dict(self) -> dict:
        return {
            "model": self.spec.model.value,
            "parameterization": self.spec.parameterization.value,
            "hc": self.hc,
            "n_sites": self.n_sites,
            "dof": self.dof,
            "coefficients": self.coefficients,
            "standard_errors": self.standard_errors(),
            "vcov": [[float(v) for v in row] for row in self.vcov],
            "effects": {k: e.to_dict() for k, e in self.effects.items()},
            "residuals": {sid: float(r) for sid, r in zip(self.site_ids, self.residuals)},
        }


def _prepare_covariates(covs: np.ndarray, names: tuple[str, ...],
                        spec: DesignSpec, total_weight: np.ndarray):
    """Select, order, and grand-mean center the site-level covariates.

    Centering subtracts the individual-level weighted grand mean, which
    equals the site-size-weighted mean of site means.
    """
    wanted = list(spec.covariate_names)
    missing = [n for n in wanted if n not in names]
    if missing:
        raise KeyError(f"covariates not in moments: {missing}")
    if spec.model is ModelKind.LATE_INTERACTION:
        inter = spec.interaction_covariate
        order = [n for n in wanted if n != inter] + [inter]
    else:
        order = wanted
    cols = np.column_stack([covs[:, names.index(n)] for n in order]) if order \
        else np.zeros((covs.shape[0], 0))
    grand = {}
    if spec.center and order:
        gm = (total_weight[:, None] * cols).sum(axis=0) / total_weight.sum()
        cols = cols - gm
        grand = {n: float(g) for n, g in zip(order, gm)}
    else:
        grand = {n: 0.0 for n in order}
    return cols, tuple(order), grand


def _assemble_design(spec: DesignSpec, phi: np.ndarray, pi_lc: np.ndarray,
                     pi_hc: np.ndarray, centered: np.ndarray,
                     cov_order: tuple[str, ...]):
    if spec.model is ModelKind.ITT:
        cols = [pi_lc, pi_hc]
        names = ["beta_lc", "beta_hc"]
        if cov_order:
            cols.extend(centered.T)
            names.extend(cov_order)
        return np.column_stack(cols), names
    cols, names = _stratum_columns(spec.parameterization, phi)
    if spec.model is ModelKind.LATE_ADJUSTED and cov_order:
        cols.extend(centered.T)
        names.extend(cov_order)
    elif spec.model is ModelKind.LATE_INTERACTION:
        w_minus = centered[:, :-1]
        w1 = centered[:, -1]
        cols.extend(w_minus.T)
        names.extend(cov_order[:-1])
        icols, inames = _interaction_columns(spec.parameterization, phi, w1,
                                             cov_order[-1])
        cols.extend(icols)
        names.extend(inames)
    return np.column_stack(cols), names


def _effects_from_fit(fit: OlsFit, param: Parameterization) -> dict[str, Estimate]:
    p = len(fit.coef)
    out = {}
    for key, a in _effect_functionals(param, p).items():
        out[key] = Estimate(
            value=float(a @ fit.coef),
            se=float(np.sqrt(max(a @ fit.vcov @ a, 0.0))),
        )
    return out


def _resolve_site_weights(site_weights, mass: np.ndarray):
    if site_weights is None:
        return None
    if isinstance(site_weights, str):
        if site_weights != "complier-mass":
            raise ValueError(f"unknown site weighting {site_weights!r}")
        return mass.copy()
    return np.asarray(site_weights, dtype=np.float64)


def fit_late(moments: Sequence[SiteMoments], spec: DesignSpec, hc: str = "hc1",
             site_weights=None) -> FitResult:
    """Fit a LATE-response model to per-site moments.

    The regression is unweighted across sites by default (targets the
    average effect across sites); `site_weights="complier-mass"` weights
    sites by their number of compliers, which targets the average across
    individuals instead. Degenerate moments must be filtered beforehand
    (see `all_site_moments`).
    """
    if spec.model not in LATE_MODELS:
        raise IncompatibleSpec(f"fit_late cannot fit model {spec.model.value!r}")
    return _fit(moments, spec, hc, site_weights)


def fit_itt(moments: Sequence[SiteMoments], spec: DesignSpec | None = None,
            hc: str = "hc1", site_weights=None) -> FitResult:
    """Fit the ITT-response variant: per-site mean difference regressed on
    the absolute complier shares (zero intercept)."""
    if spec is None:
        spec = DesignSpec(model=ModelKind.ITT)
    if spec.model is not ModelKind.ITT:
        raise IncompatibleSpec(f"fit_itt cannot fit model {spec.model.value!r}")
    return _fit(moments, spec, hc, site_weights)


def _fit(moments: Sequence[SiteMoments], spec: DesignSpec, hc: str,
         site_weights) -> FitResult:
    (site_ids, late, phi, itt, pi_lc, pi_hc, mass, total, covs,
     names) = moments_to_arrays(moments)
    if spec.model is ModelKind.ITT:
        if np.any(~np.isfinite(itt)):
            raise ValueError("one-armed sites present; drop them before fitting")
    elif np.any(~np.isfinite(phi)) or np.any(~np.isfinite(late)):
        raise ValueError("degenerate sites present; drop them before fitting")
    k = len(site_ids)
    if k < 2:
        raise TooFewSites(f"need at least 2 sites, have {k}")

    centered, cov_order, grand = _prepare_covariates(covs, names, spec, total)
    X, col_names = _assemble_design(spec, phi, pi_lc, pi_hc, centered, cov_order)
    y = itt if spec.model is ModelKind.ITT else late

    # a zero column is reported before the relevancy check so that an
    # all-zero phi surfaces as the rank problem it is
    norms = np.abs(X).sum(axis=0)
    dead = [col_names[j] for j in range(X.shape[1]) if norms[j] == 0]
    if dead:
        raise RankDeficient(dead, "zero column")
    if spec.model is not ModelKind.ITT and np.ptp(phi) == 0:
        raise NoPhiVariation(f"phi is constant at {phi[0]:.6g} across sites")

    w = _resolve_site_weights(site_weights, mass)
    fit = ols_fit(X, y, weights=w, hc=hc, column_names=col_names)
    effects = _effects_from_fit(fit, spec.parameterization)
    return FitResult(
        spec=spec,
        hc=hc.lower(),
        coef_names=tuple(col_names),
        coef=fit.coef,
        vcov=fit.vcov,
        residuals=fit.residuals,
        fitted=fit.fitted,
        effects=effects,
        dof=fit.dof,
        site_ids=site_ids,
        phi=phi,
        design=X,
        response=y,
        weights_used=w,
        complier_mass=mass,
        centered_covs=centered,
        cov_order=cov_order,
        grand_means=grand,
    )


def reparameterize(result: FitResult, to: Parameterization) -> FitResult:
    """Re-express a LATE fit in another parameterization.

    Pure linear transform of the coefficient vector and covariance; the
    residuals, fitted values, and all effect estimates are unchanged.
    """
    to = Parameterization(to)
    if result.spec.model not in LATE_MODELS:
        raise IncompatibleSpec("only LATE-response fits can be reparameterized")
    src = result.spec.parameterization
    if to is src:
        return result
    p = len(result.coef)
    m = np.eye(p)
    block = _stratum_block_matrix(src, to)
    m[0:2, 0:2] = block
    if result.spec.model is ModelKind.LATE_INTERACTION:
        m[p - 2:p, p - 2:p] = block
    coef = m @ result.coef
    vcov = m @ result.vcov @ m.T
    new_spec = replace(result.spec, parameterization=to)
    unused = np.zeros_like(result.phi)
    X, col_names = _assemble_design(new_spec, result.phi, unused, unused,
                                    result.centered_covs, result.cov_order)
    effects = {}
    for key, a in _effect_functionals(to, p).items():
        effects[key] = Estimate(
            value=float(a @ coef),
            se=float(np.sqrt(max(a @ vcov @ a, 0.0))),
        )
    return replace(
        result,
        spec=new_spec,
        coef_names=tuple(col_names),
        coef=coef,
        vcov=(vcov + vcov.T) / 2.0,
        effects=effects,
        design=X,
    )


def _stratum_row(param: Parameterization, model: ModelKind, phi_star: float,
                 w_row: np.ndarray, n_cov: int) -> np.ndarray:
    """Design row for a hypothetical site made purely of one complier type."""
    if param is Parameterization.TWO_SLOPE:
        head = [1.0 - phi_star, phi_star]
    elif param is Parameterization.INTERCEPT_PHI:
        head = [1.0, phi_star]
    else:
        head = [1.0, 1.0 - phi_star]
    if model is ModelKind.LATE_UNADJUSTED or n_cov == 0:
        return np.array(head)
    if model is ModelKind.LATE_ADJUSTED:
        return np.concatenate([head, w_row])
    # interaction: [head, w_minus, interaction pair]
    w_minus = w_row[:-1]
    w1 = w_row[-1]
    if param is Parameterization.TWO_SLOPE:
        tail = [(1.0 - phi_star) * w1, phi_star * w1]
    elif param is Parameterization.INTERCEPT_PHI:
        tail = [w1, phi_star * w1]
    else:
        tail = [w1, (1.0 - phi_star) * w1]
    return np.concatenate([head, w_minus, tail])


@dataclass(frozen=True)
class PopulationEffects:
    """Complier-mass-weighted average effects across sites."""

    itt_lc: Estimate
    itt_hc: Estimate
    contrast: Estimate

    def to_dict(self) -> dict:
        return {k: getattr(self, k).to_dict() for k in ("itt_lc", "itt_hc", "contrast")}


def population_weighted_effects(result: FitResult,
                                moments: Sequence[SiteMoments] | None = None
                                ) -> PopulationEffects:
    """Reweight predicted site-level impacts to target individuals.

    Each site's predicted impact for a complier type is averaged with
    weights proportional to that type's complier mass: (1 - phi_k) N_k
    for the low-quality side, phi_k N_k for the high-quality side.
    Standard errors come from the quadratic form of the induced linear
    functional with the robust covariance. Raises ZeroTotalMass when a
    side has no mass.
    """
    if result.spec.model not in LATE_MODELS:
        raise IncompatibleSpec("population weighting applies to LATE-response fits")
    if moments is not None:
        by_id = {m.site_id: m for m in moments}
        try:
            mass = np.array([by_id[s].complier_mass for s in result.site_ids])
            phi = np.array([by_id[s].phi for s in result.site_ids])
        except KeyError as err:
            raise IncompatibleSpec(f"moments missing fitted site {err}")
    else:
        mass = result.complier_mass
        phi = result.phi

    p = len(result.coef)
    n_cov = result.centered_covs.shape[1]
    functionals = {}
    for key, phi_star in (("itt_lc", 0.0), ("itt_hc", 1.0)):
        side = (1.0 - phi) if phi_star == 0.0 else phi
        weights = side * mass
        total = weights.sum()
        if total <= 0:
            raise ZeroTotalMass(f"no complier mass on the {key} side")
        rows = np.stack([
            _stratum_row(result.spec.parameterization, result.spec.model,
                         phi_star, result.centered_covs[i], n_cov)
            for i in range(len(phi))
        ])
        functionals[key] = (weights / total) @ rows
    a_lc = functionals["itt_lc"]
    a_hc = functionals["itt_hc"]

    def _est(a: np.ndarray) -> Estimate:
        return Estimate(value=float(a @ result.coef),
                        se=float(np.sqrt(max(a @ result.vcov @ a, 0.0))))

    return PopulationEffects(itt_lc=_est(a_lc), itt_hc=_est(a_hc),
                             contrast=_est(a_hc - a_lc))


@dataclass(frozen=True)
class OverallDecomposition:
    """Overall mean-difference effect and its complier decomposition."""

    overall_itt: float
    complier_share: float
    phi: float
    overall_late: float
    late_defined: bool
    reconstruction: float

    def to_dict(self) -> dict:
        return {
            "overall_itt": self.overall_itt,
            "complier_share": self.complier_share,
            "phi": self.phi,
            "overall_late": self.overall_late,
            "late_defined": self.late_defined,
            "reconstruction": self.reconstruction,
        }


def overall_decomposition_check(dataset: StudyDataset, itt_lc: float,
                                itt_hc: float, weighted: bool = True,
                                eps: float = _strata.DEFAULT_COMPLIER_EPS
                                ) -> OverallDecomposition:
    """Compare the pooled effect against its complier reconstruction.

    Reports the overall weighted mean difference, the overall LATE
    (difference scaled by the pooled complier share), and the value
    (1 - phi) itt_lc + phi itt_hc implied by a fitted pair of effects.
    When the pooled complier share is zero the LATE is flagged undefined.
    """
    table = _strata.take_up_proportions(dataset, weighted=weighted)
    strata_table: StratumTable = _strata.stratum_proportions(table)
    w = dataset.weight if weighted else np.ones(dataset.n)
    means = []
    for z in (1, 0):
        mask = dataset.arm == z
        means.append(np.average(dataset.outcome[mask], weights=w[mask]))
    overall_itt = float(means[0] - means[1])
    share = strata_table.complier_share
    defined = share > eps
    late = overall_itt / share if defined else float("nan")
    phi = strata_table.phi if defined else float("nan")
    recon = (1.0 - phi) * itt_lc + phi * itt_hc if defined else float("nan")
    return OverallDecomposition(
        overall_itt=overall_itt,
        complier_share=float(share),
        phi=float(phi),
        overall_late=float(late),
        late_defined=bool(defined),
        reconstruction=float(recon),
    )
