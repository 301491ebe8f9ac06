"""Data-generating processes and the Monte Carlo evaluation harness.

Two generators are provided. The "simple" process draws site-level
parameters directly: a uniform site covariate maps monotonically (and
nonlinearly) onto the complier composition, site impacts are linear in
the covariate plus noise, and individuals are generated so per-site
aggregation reproduces the site parameters in expectation. The
"calibrated" process instead resamples whole sites from a template
dataset, draws stratum membership from each site's empirical
distribution, and produces potential outcomes from a logistic model
around a fixed control success rate.

The harness replays generate -> estimate -> score for naive, bootstrap,
and oracle estimators under each covariate-adjustment flavor and reports
bias, empirical SE, RMSE, coverage, and the SE ratio, each with Monte
Carlo standard errors.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, stats as sps
from scipy.special import expit, logit

from .bootstrap import (
    BootstrapConfig,
    BootstrapTask,
    EFFECT_KEYS,
    combine_rubin,
    run_bootstrap_tasks,
)
from .data_model import StudyDataset
from .errors import BadSpec, BadTemplate, StratarcError
from .regression import (
    DesignSpec,
    ModelKind,
    fit_late,
    population_weighted_effects,
)
from .strata import SiteMoments, SiteStatistics, all_site_moments

ESTIMATORS = ("naive", "bootstrap", "oracle")
ADJUSTMENTS = ("unadjusted", "adjusted", "interaction")

# destination code per (stratum code, arm): strata ordered eat,lat,hat,lc,hc
_DEST_BY_STRATUM_ARM = np.array(
    [[0, 0],   # echs always-taker: e under both arms
     [1, 1],   # low-quality always-taker
     [2, 2],   # high-quality always-taker
     [1, 0],   # low-quality complier: lq if control, e if treated
     [2, 0]],  # high-quality complier: hq if control, e if treated
    dtype=np.int8,
)


@dataclass(frozen=True)
class PhiMap:
    """Monotone map from the site covariate to complier composition.

    "logistic" is a scaled logistic curve from `lo` to `hi`; "linear"
    interpolates linearly over the covariate range.
    """

    kind: str = "logistic"
    lo: float = 0.10
    hi: float = 0.90
    steepness: float = 2.5
    center: float = 0.0

    def __post_init__(self):
        if self.kind not in ("logistic", "linear"):
            raise BadSpec(f"unknown phi map kind {self.kind!r}")
        if not (0.0 <= self.lo < self.hi <= 1.0):
            raise BadSpec(f"phi map range [{self.lo}, {self.hi}] invalid")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "logistic":
            t = expit(self.steepness * (x - self.center))
        else:
            lo, hi = x.min(), x.max()
            t = (x - lo) / (hi - lo) if hi > lo else np.full_like(x, 0.5)
        return self.lo + (self.hi - self.lo) * t

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lo": self.lo, "hi": self.hi,
                "steepness": self.steepness, "center": self.center}


@dataclass(frozen=True)
class ConfounderSpec:
    """Site covariate effects on the two complier impacts (per unit x)."""

    slope_lc: float = 0.0
    slope_hc: float = 0.0

    def to_dict(self) -> dict:
        return {"slope_lc": self.slope_lc, "slope_hc": self.slope_hc}


def _zeros3() -> tuple:
    return ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))


@dataclass(frozen=True)
class DgpSpec:
    """Full description of one simulation scenario.

    `strata_base` orders shares as (eat, lat, hat, lc, hc); the total
    complier share lc + hc is held fixed per site while its split is set
    by the phi map. `sigma` is the 3x3 site-noise covariance over
    (impact_lc, impact_hc, phi-logit); its cross terms with the third
    coordinate must be zero. Calibrated runs use `itt_lc` / `itt_hc` as
    population targets for the logistic outcome model unless explicit
    `logit_coef_*` values are given.
    """

    kind: str = "simple"
    n_sites: int = 30
    site_size_min: int = 400
    site_size_max: int = 700
    itt_lc: float = 0.0
    itt_hc: float = 0.0
    control_ontrack_prob: float = 0.5
    strata_base: tuple = (0.05, 0.10, 0.05, 0.60, 0.20)
    phi_map: PhiMap = field(default_factory=PhiMap)
    x_low: float = -1.0
    x_high: float = 1.0
    confounder: ConfounderSpec | None = None
    sigma: tuple = field(default_factory=_zeros3)
    treated_fraction: float = 0.5
    covariate: str | None = None
    logit_coef_lc: float | None = None
    logit_coef_hc: float | None = None
    confounder_outcome_coef_lc: float = 0.0
    confounder_outcome_coef_hc: float = 0.0
    confounder_phi_shift: float = 0.0

    def __post_init__(self):
        if self.kind not in ("simple", "calibrated"):
            raise BadSpec(f"unknown dgp kind {self.kind!r}")
        if self.n_sites < 2:
            raise BadSpec("need at least 2 sites")
        if not (0 < self.site_size_min <= self.site_size_max):
            raise BadSpec("invalid site size range")
        if not 0.0 < self.control_ontrack_prob < 1.0:
            raise BadSpec("control_ontrack_prob must be in (0, 1)")
        base = tuple(float(v) for v in self.strata_base)
        if len(base) != 5 or any(v < 0 for v in base):
            raise BadSpec("strata_base must be 5 nonnegative shares")
        if abs(sum(base) - 1.0) > 1e-9:
            raise BadSpec(f"strata_base sums to {sum(base)}, expected 1")
        object.__setattr__(self, "strata_base", base)
        if not 0.0 < self.treated_fraction < 1.0:
            raise BadSpec("treated_fraction must be in (0, 1)")
        if self.x_low >= self.x_high:
            raise BadSpec("x_low must be below x_high")
        sig = np.asarray(self.sigma, dtype=np.float64)
        if sig.shape != (3, 3):
            raise BadSpec("sigma must be 3x3")
        if not np.allclose(sig, sig.T, atol=1e-12):
            raise BadSpec("sigma must be symmetric")
        if np.linalg.eigvalsh(sig).min() < -1e-10:
            raise BadSpec("sigma must be positive semidefinite")
        if abs(sig[2, 0]) > 1e-12 or abs(sig[2, 1]) > 1e-12:
            raise BadSpec("sigma cross terms with the composition coordinate must be 0")
        object.__setattr__(self, "sigma", tuple(tuple(float(v) for v in row) for row in sig))
        if isinstance(self.phi_map, dict):
            object.__setattr__(self, "phi_map", PhiMap(**self.phi_map))
        if isinstance(self.confounder, dict):
            object.__setattr__(self, "confounder", ConfounderSpec(**self.confounder))

    @property
    def complier_share(self) -> float:
        return self.strata_base[3] + self.strata_base[4]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_sites": self.n_sites,
            "site_size_min": self.site_size_min,
            "site_size_max": self.site_size_max,
            "itt_lc": self.itt_lc,
            "itt_hc": self.itt_hc,
            "control_ontrack_prob": self.control_ontrack_prob,
            "strata_base": list(self.strata_base),
            "phi_map": self.phi_map.to_dict(),
            "x_low": self.x_low,
            "x_high": self.x_high,
            "confounder": self.confounder.to_dict() if self.confounder else None,
            "sigma": [list(row) for row in self.sigma],
            "treated_fraction": self.treated_fraction,
            "covariate": self.covariate,
            "logit_coef_lc": self.logit_coef_lc,
            "logit_coef_hc": self.logit_coef_hc,
            "confounder_outcome_coef_lc": self.confounder_outcome_coef_lc,
            "confounder_outcome_coef_hc": self.confounder_outcome_coef_hc,
            "confounder_phi_shift": self.confounder_phi_shift,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DgpSpec":
        data = dict(data)
        if data.get("phi_map") is not None:
            data["phi_map"] = PhiMap(**data["phi_map"])
        if data.get("confounder") is not None:
            data["confounder"] = ConfounderSpec(**data["confounder"])
        if data.get("sigma") is not None:
            data["sigma"] = tuple(tuple(row) for row in data["sigma"])
        if data.get("strata_base") is not None:
            data["strata_base"] = tuple(data["strata_base"])
        return cls(**data)


@dataclass(frozen=True)
class PotentialOutcomeSchedule:
    """Per-individual latent truth: stratum and both potential outcomes."""

    site_codes: np.ndarray
    site_ids: tuple[str, ...]
    stratum: np.ndarray          # codes in (eat, lat, hat, lc, hc) order
    y0: np.ndarray
    y1: np.ndarray
    covariates: np.ndarray

    def exclusion_holds(self) -> bool:
        always = self.stratum <= 2
        return bool(np.all(self.y0[always] == self.y1[always]))


@dataclass(frozen=True)
class SiteTruth:
    """True site-level parameters behind one generated dataset."""

    site_ids: tuple[str, ...]
    phi: np.ndarray
    itt_lc: np.ndarray
    itt_hc: np.ndarray
    late: np.ndarray
    pi_lc: np.ndarray
    pi_hc: np.ndarray
    complier_mass: np.ndarray
    n_treated: np.ndarray
    n_control: np.ndarray
    covariates: np.ndarray        # K x c site-level values
    covariate_names: tuple[str, ...]

    def targets(self, target: str) -> dict[str, float]:
        """True effect values under site or population weighting."""
        if target == "site":
            lc = float(self.itt_lc.mean())
            hc = float(self.itt_hc.mean())
        elif target == "population":
            w_lc = (1.0 - self.phi) * self.complier_mass
            w_hc = self.phi * self.complier_mass
            lc = float((w_lc @ self.itt_lc) / w_lc.sum()) if w_lc.sum() > 0 else float("nan")
            hc = float((w_hc @ self.itt_hc) / w_hc.sum()) if w_hc.sum() > 0 else float("nan")
        else:
            raise ValueError(f"unknown target {target!r}")
        return {"itt_lc": lc, "itt_hc": hc, "contrast": hc - lc}


@dataclass(frozen=True)
class SimulatedData:
    dataset: StudyDataset
    schedule: PotentialOutcomeSchedule
    truth: SiteTruth


def oracle_moments(truth: SiteTruth) -> list[SiteMoments]:
    """Site moments built from the true parameters (no estimation noise)."""
    out = []
    for k, sid in enumerate(truth.site_ids):
        pi_c = truth.pi_lc[k] + truth.pi_hc[k]
        out.append(SiteMoments(
            site_id=sid,
            late=float(truth.late[k]),
            phi=float(truth.phi[k]),
            itt=float(pi_c * truth.late[k]),
            pi_lc=float(truth.pi_lc[k]),
            pi_hc=float(truth.pi_hc[k]),
            complier_mass=float(truth.complier_mass[k]),
            covariates={name: float(truth.covariates[k, j])
                        for j, name in enumerate(truth.covariate_names)},
            n_treated=float(truth.n_treated[k]),
            n_control=float(truth.n_control[k]),
            degenerate=False,
            clipped=False,
        ))
    return out


# ---------------------------------------------------------------------------
# simple process

def _draw_strata(rng, cum_by_site: np.ndarray, site_codes: np.ndarray) -> np.ndarray:
    u = rng.random(len(site_codes))
    cum = cum_by_site[site_codes]
    return (u[:, None] > cum).sum(axis=1).astype(np.int8)


def _assign_arms(rng, sizes: np.ndarray, n_treated: np.ndarray) -> np.ndarray:
    parts = []
    for n, nt in zip(sizes, n_treated):
        arm = np.zeros(n, dtype=np.int8)
        arm[:nt] = 1
        parts.append(arm[rng.permutation(n)])
    return np.concatenate(parts)


def _complier_p1(p0: float, itt_lc_k, itt_hc_k, site_codes, stratum):
    p1 = np.full(len(site_codes), p0)
    lc = stratum == 3
    hc = stratum == 4
    p1[lc] = p0 + itt_lc_k[site_codes[lc]]
    p1[hc] = p0 + itt_hc_k[site_codes[hc]]
    return p1


def generate_simple(spec: DgpSpec, rng: np.random.Generator) -> SimulatedData:
    """Generate one dataset from the correctly specified site-level model.

    Site covariates are uniform; composition follows the configured
    monotone map; impacts are linear in the (mean-centered) covariate
    plus site noise. Success probabilities are clipped into [0, 1] and
    the recorded truth reflects any clipping.
    """
    if spec.kind != "simple":
        raise BadSpec(f"generate_simple got kind {spec.kind!r}")
    k = spec.n_sites
    p0 = spec.control_ontrack_prob
    sizes = rng.integers(spec.site_size_min, spec.site_size_max + 1, size=k)
    x = rng.uniform(spec.x_low, spec.x_high, size=k)
    x_centered = x - 0.5 * (spec.x_low + spec.x_high)

    sig = np.asarray(spec.sigma)
    noise = np.zeros((k, 2))
    if sig[:2, :2].any():
        chol = np.linalg.cholesky(sig[:2, :2] + 1e-15 * np.eye(2))
        noise = rng.standard_normal((k, 2)) @ chol.T
    phi = spec.phi_map(x)
    if sig[2, 2] > 0:
        jitter = rng.standard_normal(k) * math.sqrt(sig[2, 2])
        phi = expit(logit(np.clip(phi, 1e-9, 1 - 1e-9)) + jitter)

    slope_lc = spec.confounder.slope_lc if spec.confounder else 0.0
    slope_hc = spec.confounder.slope_hc if spec.confounder else 0.0
    itt_lc_k = spec.itt_lc + slope_lc * x_centered + noise[:, 0]
    itt_hc_k = spec.itt_hc + slope_hc * x_centered + noise[:, 1]
    itt_lc_k = np.clip(p0 + itt_lc_k, 0.0, 1.0) - p0
    itt_hc_k = np.clip(p0 + itt_hc_k, 0.0, 1.0) - p0

    eat, lat, hat = spec.strata_base[:3]
    pi_c = spec.complier_share
    pi_lc_k = pi_c * (1.0 - phi)
    pi_hc_k = pi_c * phi
    probs = np.column_stack([
        np.full(k, eat), np.full(k, lat), np.full(k, hat), pi_lc_k, pi_hc_k,
    ])
    cum = np.cumsum(probs, axis=1)

    site_codes = np.repeat(np.arange(k), sizes)
    stratum = _draw_strata(rng, cum, site_codes)
    n_treated = np.clip(np.round(spec.treated_fraction * sizes).astype(int), 1, sizes - 1)
    arm = _assign_arms(rng, sizes, n_treated)

    y0 = (rng.random(len(site_codes)) < p0).astype(np.int8)
    p1 = _complier_p1(p0, itt_lc_k, itt_hc_k, site_codes, stratum)
    y1_draw = (rng.random(len(site_codes)) < p1).astype(np.int8)
    complier = stratum >= 3
    y1 = np.where(complier, y1_draw, y0).astype(np.int8)

    dest = _DEST_BY_STRATUM_ARM[stratum, arm]
    y_obs = np.where(arm == 1, y1, y0).astype(np.int8)
    covs = x[site_codes][:, None]
    site_ids = tuple(f"s{j:03d}" for j in range(k))

    dataset = StudyDataset(
        site_ids, site_codes, arm, dest, y_obs,
        np.ones(len(site_codes)), covs, ("x",),
    )
    schedule = PotentialOutcomeSchedule(
        site_codes=site_codes, site_ids=site_ids, stratum=stratum,
        y0=y0, y1=y1, covariates=covs,
    )
    late = (1.0 - phi) * itt_lc_k + phi * itt_hc_k
    truth = SiteTruth(
        site_ids=site_ids,
        phi=phi,
        itt_lc=itt_lc_k,
        itt_hc=itt_hc_k,
        late=late,
        pi_lc=pi_lc_k,
        pi_hc=pi_hc_k,
        complier_mass=pi_c * sizes.astype(float),
        n_treated=n_treated.astype(float),
        n_control=(sizes - n_treated).astype(float),
        covariates=x[:, None],
        covariate_names=("x",),
    )
    return SimulatedData(dataset=dataset, schedule=schedule, truth=truth)


# ---------------------------------------------------------------------------
# calibrated process

@dataclass(frozen=True)
class _TemplateSite:
    site_id: str
    n_treated: int
    n_control: int
    pi: np.ndarray               # 5 shares, clipped and renormalized
    cov_mean: np.ndarray
    cov_pool: np.ndarray         # per-student covariate rows for resampling


class CalibratedGenerator:
    """Calibrated generator bound to a template dataset.

    Precomputes per-site stratum distributions and solves the logistic
    intercepts so the population-level complier effects hit the spec's
    `itt_lc` / `itt_hc` targets (unless coefficients are given).
    """

    def __init__(self, template: StudyDataset, spec: DgpSpec):
        if spec.kind != "calibrated":
            raise BadSpec(f"calibrated generator got kind {spec.kind!r}")
        if template.n_sites < 2:
            raise BadTemplate("template needs at least 2 sites")
        self.spec = spec
        self.covariate = spec.covariate or (
            template.covariate_names[0] if template.covariate_names else None
        )
        if self.covariate is None:
            raise BadTemplate("template has no covariates to carry")
        if self.covariate not in template.covariate_names:
            raise BadTemplate(f"template lacks covariate {self.covariate!r}")
        self._cov_j = template.covariate_names.index(self.covariate)
        self.covariate_names = template.covariate_names

        stats = SiteStatistics(template)
        if np.any(stats.one_armed):
            raise BadTemplate("every template site needs both arms")
        self.sites: list[_TemplateSite] = []
        for k, sid in enumerate(template.site_ids):
            idx = template.site_index[sid]
            p = stats.p[k]
            raw = np.array([
                p[0, 0],            # eat
                p[1, 1],            # lat
                p[1, 2],            # hat
                p[0, 1] - p[1, 1],  # lc
                p[0, 2] - p[1, 2],  # hc
            ])
            pi = np.clip(raw, 0.0, None)
            total = pi.sum()
            if total <= 0:
                raise BadTemplate(f"template site {sid!r} has no usable take-up")
            pi = pi / total
            self.sites.append(_TemplateSite(
                site_id=sid,
                n_treated=int((template.arm[idx] == 1).sum()),
                n_control=int((template.arm[idx] == 0).sum()),
                pi=pi,
                cov_mean=stats.cov_means[k].copy(),
                cov_pool=template.covariates[idx].copy(),
            ))
        masses = np.array([s.n_treated + s.n_control for s in self.sites], dtype=float)
        means = np.stack([s.cov_mean for s in self.sites])
        self.grand_mean = (masses @ means) / masses.sum()
        self.x_centered = means[:, self._cov_j] - self.grand_mean[self._cov_j]
        self.coef_lc, self.coef_hc = self._solve_coefficients()

    def _population_itt(self, coef: float, slope: float, stratum: int) -> float:
        """Complier-mass-weighted mean impact implied by the logistic model."""
        p0 = self.spec.control_ontrack_prob
        base = logit(p0)
        masses = []
        impacts = []
        for s, x in zip(self.sites, self.x_centered):
            pi_side = s.pi[stratum]
            n = s.n_treated + s.n_control
            masses.append(pi_side * n)
            impacts.append(expit(base + coef + slope * x) - p0)
        masses = np.asarray(masses)
        if masses.sum() <= 0:
            return 0.0
        return float((masses @ np.asarray(impacts)) / masses.sum())

    def _solve_coefficients(self) -> tuple[float, float]:
        spec = self.spec
        out = []
        for target, given, slope, stratum in (
            (spec.itt_lc, spec.logit_coef_lc, spec.confounder_outcome_coef_lc, 3),
            (spec.itt_hc, spec.logit_coef_hc, spec.confounder_outcome_coef_hc, 4),
        ):
            if given is not None:
                out.append(float(given))
                continue
            if target == 0.0 and slope == 0.0:
                out.append(0.0)
                continue
            lo_val = self._population_itt(-12.0, slope, stratum)
            hi_val = self._population_itt(12.0, slope, stratum)
            if not lo_val < target < hi_val:
                raise BadSpec(
                    f"target impact {target} for stratum {stratum} is outside the "
                    f"attainable range ({lo_val:.4f}, {hi_val:.4f})"
                )
            sol = optimize.brentq(
                lambda c: self._population_itt(c, slope, stratum) - target,
                -12.0, 12.0, xtol=1e-12,
            )
            out.append(float(sol))
        return out[0], out[1]

    def generate(self, rng: np.random.Generator) -> SimulatedData:
        spec = self.spec
        p0 = spec.control_ontrack_prob
        base = logit(p0)
        n_template = len(self.sites)
        k = spec.n_sites
        chosen = rng.integers(0, n_template, size=k)

        site_parts = []
        truth_rows = []
        for j, t_idx in enumerate(chosen):
            src = self.sites[t_idx]
            x = self.x_centered[t_idx]
            pi = src.pi
            if spec.confounder_phi_shift != 0.0:
                pi_c = pi[3] + pi[4]
                if pi_c > 0:
                    phi0 = np.clip(pi[4] / pi_c, 1e-9, 1 - 1e-9)
                    phi1 = expit(logit(phi0) + spec.confounder_phi_shift * x)
                    pi = np.array([pi[0], pi[1], pi[2],
                                   pi_c * (1 - phi1), pi_c * phi1])
            n = src.n_treated + src.n_control
            stratum = (rng.random(n)[:, None] > np.cumsum(pi)[None, :]).sum(axis=1)
            stratum = stratum.astype(np.int8)
            arm = np.zeros(n, dtype=np.int8)
            arm[:src.n_treated] = 1
            arm = arm[rng.permutation(n)]
            y0 = (rng.random(n) < p0).astype(np.int8)
            p1_lc = expit(base + self.coef_lc + spec.confounder_outcome_coef_lc * x)
            p1_hc = expit(base + self.coef_hc + spec.confounder_outcome_coef_hc * x)
            p1 = np.full(n, p0)
            p1[stratum == 3] = p1_lc
            p1[stratum == 4] = p1_hc
            y1_draw = (rng.random(n) < p1).astype(np.int8)
            y1 = np.where(stratum >= 3, y1_draw, y0).astype(np.int8)
            dest = _DEST_BY_STRATUM_ARM[stratum, arm]
            y_obs = np.where(arm == 1, y1, y0).astype(np.int8)
            pool_draw = rng.integers(0, len(src.cov_pool), size=n)
            covs = src.cov_pool[pool_draw]
            site_parts.append((arm, dest, y_obs, stratum, y0, y1, covs))

            pi_c = pi[3] + pi[4]
            phi_true = pi[4] / pi_c if pi_c > 0 else float("nan")
            itt_lc_true = p1_lc - p0
            itt_hc_true = p1_hc - p0
            truth_rows.append((
                phi_true, itt_lc_true, itt_hc_true,
                (1 - phi_true) * itt_lc_true + phi_true * itt_hc_true
                if pi_c > 0 else float("nan"),
                pi[3], pi[4], pi_c * n, src.n_treated, src.n_control, x,
            ))

        site_ids = tuple(f"r{j:03d}_{self.sites[t].site_id}"
                         for j, t in enumerate(chosen))
        sizes = [len(part[0]) for part in site_parts]
        site_codes = np.repeat(np.arange(k), sizes)
        arm = np.concatenate([p[0] for p in site_parts])
        dest = np.concatenate([p[1] for p in site_parts])
        y_obs = np.concatenate([p[2] for p in site_parts])
        stratum = np.concatenate([p[3] for p in site_parts])
        y0 = np.concatenate([p[4] for p in site_parts])
        y1 = np.concatenate([p[5] for p in site_parts])
        covs = np.concatenate([p[6] for p in site_parts])

        dataset = StudyDataset(
            site_ids, site_codes, arm, dest, y_obs,
            np.ones(len(site_codes)), covs, self.covariate_names,
        )
        schedule = PotentialOutcomeSchedule(
            site_codes=site_codes, site_ids=site_ids, stratum=stratum,
            y0=y0, y1=y1, covariates=covs,
        )
        rows = np.array(truth_rows, dtype=float)
        # truth covariates: the centered confounder value used by the model
        cov_matrix = rows[:, 9][:, None]
        truth = SiteTruth(
            site_ids=site_ids,
            phi=rows[:, 0],
            itt_lc=rows[:, 1],
            itt_hc=rows[:, 2],
            late=rows[:, 3],
            pi_lc=rows[:, 4],
            pi_hc=rows[:, 5],
            complier_mass=rows[:, 6],
            n_treated=rows[:, 7],
            n_control=rows[:, 8],
            covariates=cov_matrix,
            covariate_names=(self.covariate,),
        )
        return SimulatedData(dataset=dataset, schedule=schedule, truth=truth)


def generate_calibrated(template: StudyDataset, spec: DgpSpec,
                        rng: np.random.Generator) -> SimulatedData:
    """One-shot calibrated draw; see CalibratedGenerator for repeated use."""
    return CalibratedGenerator(template, spec).generate(rng)


# ---------------------------------------------------------------------------
# synthetic template

def synthetic_echs_template(seed: int = 20240913) -> StudyDataset:
    """Deterministic synthetic multi-site dataset shaped like the study
    the calibrated process mimics: 38 lottery sites, 3477 students with
    about 58% treated, 22 sites with no high-quality compliers, modest
    sampling weights, and one site-shifted student covariate ("read").

    Entirely synthetic; shipped because the original microdata is not
    public.
    """
    rng = np.random.default_rng(seed)
    k = 38
    raw = rng.lognormal(mean=math.log(78.0), sigma=0.5, size=k)
    sizes = np.clip(np.round(raw).astype(int), 28, 240)
    diff = 3477 - sizes.sum()
    order = np.argsort(sizes)[::-1]
    i = 0
    while diff != 0:
        j = order[i % k]
        step = 1 if diff > 0 else -1
        if 28 <= sizes[j] + step <= 240:
            sizes[j] += step
            diff -= step
        i += 1

    hq_sites = rng.permutation(k)[:16]     # the rest have no hq compliers
    has_hq = np.zeros(k, dtype=bool)
    has_hq[hq_sites] = True

    rows_arm = []
    rows_dest = []
    rows_y = []
    rows_w = []
    rows_read = []
    rows_site = []
    for j in range(k):
        n = int(sizes[j])
        n_t = int(np.clip(round(n * np.clip(rng.normal(0.58, 0.035), 0.48, 0.68)),
                          6, n - 6))
        n_c = n - n_t
        # control arm composition
        c_e = min(n_c - 2, max(0, round(n_c * rng.uniform(0.01, 0.05))))
        c_hq = 0
        if has_hq[j]:
            c_hq = min(n_c - c_e - 1, max(1, round(n_c * rng.uniform(0.08, 0.32))))
        c_lq = n_c - c_e - c_hq
        # treated arm composition: no hq attendance keeps hq-complier
        # shares exactly zero at the 22 sites without hq compliers
        t_e = max(1, round(n_t * rng.uniform(0.80, 0.93)))
        t_hq = 0
        if has_hq[j] and rng.random() < 0.4:
            t_hq = min(2, max(0, c_hq - 1))
        t_e = min(t_e, n_t - t_hq - 1)
        t_lq = n_t - t_e - t_hq

        base_rate = float(np.clip(rng.normal(0.50, 0.07), 0.25, 0.75))
        effect = float(np.clip(rng.normal(0.065, 0.045), -0.05, 0.20))
        mu_read = float(rng.normal(0.12 if has_hq[j] else -0.06, 0.32))

        arm = np.concatenate([np.zeros(n_c, dtype=np.int8), np.ones(n_t, dtype=np.int8)])
        dest = np.concatenate([
            np.repeat(np.int8(0), c_e), np.repeat(np.int8(1), c_lq),
            np.repeat(np.int8(2), c_hq),
            np.repeat(np.int8(0), t_e), np.repeat(np.int8(1), t_lq),
            np.repeat(np.int8(2), t_hq),
        ])
        p = np.clip(base_rate + effect * arm, 0.02, 0.98)
        y = (rng.random(n) < p).astype(np.int8)
        w = rng.uniform(0.6, 1.8, size=n)
        read = rng.normal(mu_read, 0.9, size=n)

        rows_arm.append(arm)
        rows_dest.append(dest)
        rows_y.append(y)
        rows_w.append(w)
        rows_read.append(read)
        rows_site.append(np.full(n, j))

    site_ids = tuple(f"lottery{j:02d}" for j in range(k))
    return StudyDataset(
        site_ids,
        np.concatenate(rows_site),
        np.concatenate(rows_arm),
        np.concatenate(rows_dest),
        np.concatenate(rows_y),
        np.concatenate(rows_w),
        np.concatenate(rows_read)[:, None],
        ("read",),
    )


# ---------------------------------------------------------------------------
# Monte Carlo harness

@dataclass(frozen=True)
class MetricCell:
    """Scores for one estimator x adjustment x effect combination."""

    bias: float
    empirical_se: float
    mean_estimated_se: float
    rmse: float
    coverage: float
    se_ratio: float
    n_used: int
    mcse_bias: float
    mcse_empirical_se: float
    mcse_rmse: float
    mcse_coverage: float

    def to_dict(self) -> dict:
        return {
            "bias": self.bias,
            "empirical_se": self.empirical_se,
            "mean_estimated_se": self.mean_estimated_se,
            "rmse": self.rmse,
            "coverage": self.coverage,
            "se_ratio": self.se_ratio,
            "n_used": self.n_used,
            "mcse_bias": self.mcse_bias,
            "mcse_empirical_se": self.mcse_empirical_se,
            "mcse_rmse": self.mcse_rmse,
            "mcse_coverage": self.mcse_coverage,
        }


@dataclass(frozen=True)
class MonteCarloReport:
    cells: dict[tuple[str, str, str], MetricCell]
    replicates: int
    config: dict

    def cell(self, estimator: str, adjustment: str, effect: str) -> MetricCell:
        return self.cells[(estimator, adjustment, effect)]

    def to_dict(self) -> dict:
        return {
            "replicates": self.replicates,
            "config": self.config,
            "cells": {
                f"{est}/{adj}/{eff}": cell.to_dict()
                for (est, adj, eff), cell in sorted(self.cells.items())
            },
        }


def _adjustment_spec(adjustment: str, covariate: str) -> DesignSpec:
    if adjustment == "unadjusted":
        return DesignSpec(model=ModelKind.LATE_UNADJUSTED)
    if adjustment == "adjusted":
        return DesignSpec(model=ModelKind.LATE_ADJUSTED, covariate_names=(covariate,))
    if adjustment == "interaction":
        return DesignSpec(model=ModelKind.LATE_INTERACTION,
                          covariate_names=(covariate,),
                          interaction_covariate=covariate)
    raise ValueError(f"unknown adjustment {adjustment!r}")


def _point_effects(moments, spec: DesignSpec, hc: str, target: str):
    fit = fit_late(moments, spec, hc=hc)
    if target == "population":
        pop = population_weighted_effects(fit)
        return {"itt_lc": pop.itt_lc, "itt_hc": pop.itt_hc, "contrast": pop.contrast}
    return dict(fit.effects)


_NAN_ROW = (float("nan"),) * 4


def _run_replicate(rep: int, spec: DgpSpec, master_seed: int, estimators, adjustments,
                   bootstrap_replicates: int, hc: str, target: str, level: float,
                   generator: CalibratedGenerator | None):
    """One generate -> estimate -> score pass.

    Returns {(estimator, adjustment, effect): (est, se, ci_lo, ci_hi)}
    plus the true effect values for this replicate.
    """
    rng = np.random.default_rng([master_seed, rep])
    if spec.kind == "simple":
        sim = generate_simple(spec, rng)
        covariate = "x"
    else:
        sim = generator.generate(rng)
        covariate = generator.covariate
    truth = sim.truth.targets(target)
    z = float(sps.norm.ppf(0.5 + level / 2.0))
    out: dict[tuple[str, str, str], tuple] = {}

    try:
        moments = all_site_moments(sim.dataset, drop_degenerate=True)
    except StratarcError:
        moments = None
    oracle = oracle_moments(sim.truth)
    specs = {adj: _adjustment_spec(adj, covariate) for adj in adjustments}

    for adj, dspec in specs.items():
        if "naive" in estimators:
            row = {}
            if moments is not None:
                try:
                    eff = _point_effects(moments, dspec, hc, target)
                    row = {k: (e.value, e.se, e.value - z * e.se, e.value + z * e.se)
                           for k, e in eff.items()}
                except (StratarcError, ValueError):
                    row = {}
            for key in EFFECT_KEYS:
                out[("naive", adj, key)] = row.get(key, _NAN_ROW)
        if "oracle" in estimators:
            row = {}
            try:
                eff = _point_effects(oracle, dspec, hc, target)
                row = {k: (e.value, e.se, e.value - z * e.se, e.value + z * e.se)
                       for k, e in eff.items()}
            except (StratarcError, ValueError):
                row = {}
            for key in EFFECT_KEYS:
                out[("oracle", adj, key)] = row.get(key, _NAN_ROW)

    if "bootstrap" in estimators:
        boot_seed = int(np.random.SeedSequence([master_seed, rep, 104729])
                        .generate_state(1)[0])
        cfg = BootstrapConfig(replicates=bootstrap_replicates, seed=boot_seed)
        tasks = {adj: BootstrapTask(spec=dspec, hc=hc, target=target)
                 for adj, dspec in specs.items()}
        raw, _ = run_bootstrap_tasks(sim.dataset, tasks, cfg)
        for adj in adjustments:
            points = raw[adj]["points"]
            ses = raw[adj]["ses"]
            ok = ~np.isnan(points["itt_lc"])
            for key in EFFECT_KEYS:
                if ok.sum() >= 2:
                    comb = combine_rubin(points[key][ok], ses[key][ok], level=level)
                    out[("bootstrap", adj, key)] = (comb.point, comb.total_se,
                                                    comb.ci_low, comb.ci_high)
                else:
                    out[("bootstrap", adj, key)] = _NAN_ROW
    return out, truth


_WORKER = {}


def _worker_init(args):
    _WORKER["args"] = args


def _worker_run(rep: int):
    return _run_replicate(rep, *_WORKER["args"])


def run_monte_carlo(spec: DgpSpec, reps: int, seed: int,
                    template: StudyDataset | None = None,
                    estimators: Sequence[str] = ESTIMATORS,
                    adjustments: Sequence[str] = ADJUSTMENTS,
                    bootstrap_replicates: int = 200,
                    hc: str = "hc1", target: str = "site",
                    level: float = 0.95, threads: int = 1) -> MonteCarloReport:
    """Replicate the full pipeline and score each estimator against truth.

    Per cell: bias is the mean error against the replicate's true effect,
    empirical_se the error standard deviation, rmse the root mean squared
    error (so rmse^2 = bias^2 + empirical_se^2 exactly), coverage the
    fraction of nominal-level intervals containing the truth, and
    se_ratio the mean estimated SE over the empirical SE. Deterministic
    given the seed, independent of `threads`.
    """
    if reps < 2:
        raise BadSpec("need at least 2 replicates")
    estimators = tuple(estimators)
    adjustments = tuple(adjustments)
    for est in estimators:
        if est not in ESTIMATORS:
            raise ValueError(f"unknown estimator {est!r}")
    for adj in adjustments:
        if adj not in ADJUSTMENTS:
            raise ValueError(f"unknown adjustment {adj!r}")
    generator = None
    if spec.kind == "calibrated":
        if template is None:
            raise BadTemplate("calibrated runs need a template dataset")
        generator = CalibratedGenerator(template, spec)

    args = (spec, seed, estimators, adjustments, bootstrap_replicates, hc,
            target, level, generator)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads, initializer=_worker_init,
                                 initargs=(args,)) as pool:
            results = list(pool.map(_worker_run, range(reps), chunksize=8))
    else:
        results = [_run_replicate(rep, *args) for rep in range(reps)]

    keys = [(est, adj, eff) for est in estimators for adj in adjustments
            for eff in EFFECT_KEYS]
    est_arr = {key: np.full(reps, np.nan) for key in keys}
    se_arr = {key: np.full(reps, np.nan) for key in keys}
    lo_arr = {key: np.full(reps, np.nan) for key in keys}
    hi_arr = {key: np.full(reps, np.nan) for key in keys}
    truth_arr = {eff: np.full(reps, np.nan) for eff in EFFECT_KEYS}
    for r, (row, truth) in enumerate(results):
        for eff in EFFECT_KEYS:
            truth_arr[eff][r] = truth[eff]
        for key in keys:
            est_arr[key][r], se_arr[key][r], lo_arr[key][r], hi_arr[key][r] = \
                row.get(key, _NAN_ROW)

    cells = {}
    for key in keys:
        eff = key[2]
        errors = est_arr[key] - truth_arr[eff]
        ok = ~np.isnan(errors)
        n = int(ok.sum())
        if n == 0:
            cells[key] = MetricCell(*(float("nan"),) * 6, 0, *(float("nan"),) * 4)
            continue
        e = errors[ok]
        bias = float(e.mean())
        emp_se = float(e.std(ddof=0))
        rmse = float(np.sqrt(np.mean(e ** 2)))
        mean_se = float(np.nanmean(se_arr[key][ok]))
        covered = (lo_arr[key][ok] <= truth_arr[eff][ok]) & \
                  (truth_arr[eff][ok] <= hi_arr[key][ok])
        coverage = float(np.mean(covered))
        se_ratio = mean_se / emp_se if emp_se > 0 else float("inf")
        var_e2 = float(np.var(e ** 2, ddof=0))
        cells[key] = MetricCell(
            bias=bias,
            empirical_se=emp_se,
            mean_estimated_se=mean_se,
            rmse=rmse,
            coverage=coverage,
            se_ratio=float(se_ratio),
            n_used=n,
            mcse_bias=emp_se / math.sqrt(n),
            mcse_empirical_se=emp_se / math.sqrt(2.0 * max(n - 1, 1)),
            mcse_rmse=(math.sqrt(var_e2) / (2.0 * rmse * math.sqrt(n))
                       if rmse > 0 else 0.0),
            mcse_coverage=math.sqrt(max(coverage * (1.0 - coverage), 0.0) / n),
        )
    config = {
        "spec": spec.to_dict(),
        "reps": reps,
        "seed": seed,
        "estimators": list(estimators),
        "adjustments": list(adjustments),
        "bootstrap_replicates": bootstrap_replicates,
        "hc": hc,
        "target": target,
        "level": level,
    }
    return MonteCarloReport(cells=cells, replicates=reps, config=config)
