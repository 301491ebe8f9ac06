"""Take-up proportions, principal-stratum shares, and site-level moments.

All estimators here are Hajek-style: weighted sums normalized by the sum
of weights, so rescaling every weight by a positive constant changes
nothing. The array core (`site_statistics`) computes every per-site
quantity in one vectorized pass and is shared with the bootstrap and
simulation machinery.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data_model import Arm, DEST_ORDER, Destination, Stratum, StudyDataset
from .errors import EmptyArm, TooFewSites, ZeroVariance

#: complier share at or below which a site is treated as degenerate
DEFAULT_COMPLIER_EPS = 1e-6


@dataclass(frozen=True)
class TakeUpTable:
    """Per-arm destination proportions p[z][d] and effective counts n[z][d].

    Rows (arms) each sum to one. `n` holds weighted counts; with unit
    weights these are plain record counts.
    """

    p: np.ndarray  # shape (2, 3), arm x destination
    n: np.ndarray  # shape (2, 3), weighted counts
    weighted: bool = True

    def proportion(self, arm: Arm | int, dest: Destination) -> float:
        return float(self.p[int(arm), DEST_ORDER.index(dest)])

    def to_dict(self) -> dict:
        return {
            "p": {
                str(int(z)): {d.value: float(self.p[z, j]) for j, d in enumerate(DEST_ORDER)}
                for z in (0, 1)
            },
            "n": {
                str(int(z)): {d.value: float(self.n[z, j]) for j, d in enumerate(DEST_ORDER)}
                for z in (0, 1)
            },
        }


@dataclass(frozen=True)
class StratumTable:
    """Estimated shares of the five principal strata.

    `pi` is clipped at zero and renormalized to sum to one; `raw` keeps
    the unclipped identification-formula values for diagnostics, and
    `clipped` flags strata whose raw estimate was negative.
    """

    pi: dict[Stratum, float]
    raw: dict[Stratum, float]
    clipped: dict[Stratum, bool]

    @property
    def any_clipped(self) -> bool:
        return any(self.clipped.values())

    @property
    def complier_share(self) -> float:
        return self.pi[Stratum.LOW_QUALITY_COMPLIER] + self.pi[Stratum.HIGH_QUALITY_COMPLIER]

    @property
    def phi(self) -> float:
        c = self.complier_share
        return self.pi[Stratum.HIGH_QUALITY_COMPLIER] / c if c > 0 else float("nan")

    def to_dict(self) -> dict:
        return {
            "pi": {s.value: float(v) for s, v in self.pi.items()},
            "raw": {s.value: float(v) for s, v in self.raw.items()},
            "clipped": {s.value: bool(v) for s, v in self.clipped.items()},
        }


@dataclass(frozen=True)
class SiteMoments:
    """Per-site aggregate statistics feeding the cross-site regression."""

    site_id: str
    late: float
    phi: float
    itt: float               # raw difference in arm means
    pi_lc: float             # clipped complier shares
    pi_hc: float
    complier_mass: float     # complier share x effective site size
    covariates: dict[str, float]
    n_treated: float         # effective (weighted) arm sizes
    n_control: float
    degenerate: bool
    clipped: bool

    @property
    def total_weight(self) -> float:
        return self.n_treated + self.n_control


class SiteStatistics:
    """Vectorized per-site statistics over all K sites of a dataset.

    Arrays are aligned with `dataset.site_ids`. Sites missing an arm or
    with (clipped) complier share at most `eps` are flagged degenerate and
    carry NaN moments.
    """

    __slots__ = (
        "site_ids", "p", "n_eff", "ybar", "pi_lc_raw", "pi_hc_raw",
        "pi_lc", "pi_hc", "phi", "late", "itt", "complier_mass",
        "cov_means", "covariate_names", "total_weight", "degenerate",
        "clipped", "one_armed",
    )

    def __init__(self, dataset: StudyDataset, indices: np.ndarray | None = None,
                 weighted: bool = True, eps: float = DEFAULT_COMPLIER_EPS):
        if indices is None:
            site = dataset.site_codes
            arm = dataset.arm
            dest = dataset.dest
            y = dataset.outcome
            w = dataset.weight if weighted else np.ones(dataset.n)
            covs = dataset.covariates
        else:
            site = dataset.site_codes[indices]
            arm = dataset.arm[indices]
            dest = dataset.dest[indices]
            y = dataset.outcome[indices]
            w = dataset.weight[indices] if weighted else np.ones(len(indices))
            covs = dataset.covariates[indices]
        k = dataset.n_sites
        self.site_ids = dataset.site_ids
        self.covariate_names = dataset.covariate_names

        cell = (site.astype(np.int64) * 2 + arm) * 3 + dest
        nbins = k * 6
        wsum = np.bincount(cell, weights=w, minlength=nbins).reshape(k, 2, 3)
        ywsum = np.bincount(cell, weights=w * y, minlength=nbins).reshape(k, 2, 3)

        arm_w = wsum.sum(axis=2)                      # (k, 2) effective arm sizes
        self.n_eff = arm_w
        self.one_armed = np.any(arm_w <= 0, axis=1)
        safe_arm_w = np.where(arm_w > 0, arm_w, np.nan)
        self.p = wsum / safe_arm_w[:, :, None]        # (k, 2, 3)
        self.ybar = ywsum.sum(axis=2) / safe_arm_w    # (k, 2)

        # identification from per-arm destination shares
        self.pi_lc_raw = self.p[:, 0, 1] - self.p[:, 1, 1]
        self.pi_hc_raw = self.p[:, 0, 2] - self.p[:, 1, 2]
        self.pi_lc = np.clip(self.pi_lc_raw, 0.0, None)
        self.pi_hc = np.clip(self.pi_hc_raw, 0.0, None)
        self.clipped = (self.pi_lc_raw < 0) | (self.pi_hc_raw < 0)

        pi_c = self.pi_lc + self.pi_hc
        self.total_weight = arm_w.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            self.itt = self.ybar[:, 1] - self.ybar[:, 0]
            self.phi = np.where(pi_c > eps, self.pi_hc / np.where(pi_c > 0, pi_c, 1.0), np.nan)
            self.late = np.where(pi_c > eps, self.itt / np.where(pi_c > 0, pi_c, 1.0), np.nan)
        self.complier_mass = pi_c * self.total_weight
        self.degenerate = self.one_armed | ~(pi_c > eps)
        self.late = np.where(self.degenerate, np.nan, self.late)
        self.phi = np.where(self.degenerate, np.nan, self.phi)

        ncov = covs.shape[1]
        if ncov:
            wtot = np.bincount(site, weights=w, minlength=k)
            means = np.empty((k, ncov))
            for j in range(ncov):
                sums = np.bincount(site, weights=w * covs[:, j], minlength=k)
                with np.errstate(invalid="ignore", divide="ignore"):
                    means[:, j] = sums / np.where(wtot > 0, wtot, np.nan)
            self.cov_means = means
        else:
            self.cov_means = np.zeros((k, 0))

    @property
    def n_sites(self) -> int:
        return len(self.site_ids)

    def moments(self, k: int) -> SiteMoments:
        return SiteMoments(
            site_id=self.site_ids[k],
            late=float(self.late[k]),
            phi=float(self.phi[k]),
            itt=float(self.itt[k]),
            pi_lc=float(self.pi_lc[k]),
            pi_hc=float(self.pi_hc[k]),
            complier_mass=float(self.complier_mass[k]),
            covariates={name: float(self.cov_means[k, j])
                        for j, name in enumerate(self.covariate_names)},
            n_treated=float(self.n_eff[k, 1]),
            n_control=float(self.n_eff[k, 0]),
            degenerate=bool(self.degenerate[k]),
            clipped=bool(self.clipped[k]),
        )


def take_up_proportions(dataset: StudyDataset, site_id: str | None = None,
                        weighted: bool = True) -> TakeUpTable:
    """Destination shares by arm, overall or for one site.

    p[z][d] = (sum of weights with arm z, destination d) / (arm-z weight).
    Raises EmptyArm if either arm is missing from the chosen subset.
    """
    if site_id is None:
        idx = None
        arm = dataset.arm
        dest = dataset.dest
        w = dataset.weight if weighted else np.ones(dataset.n)
    else:
        idx = dataset.site_index[site_id]
        arm = dataset.arm[idx]
        dest = dataset.dest[idx]
        w = dataset.weight[idx] if weighted else np.ones(len(idx))
    cell = arm.astype(np.int64) * 3 + dest
    n = np.bincount(cell, weights=w, minlength=6).reshape(2, 3)
    arm_w = n.sum(axis=1)
    for z in (0, 1):
        if arm_w[z] <= 0:
            raise EmptyArm(z, site_id)
    return TakeUpTable(p=n / arm_w[:, None], n=n, weighted=weighted)


def stratum_proportions(takeup: TakeUpTable) -> StratumTable:
    """Principal-stratum shares from a take-up table.

    Always-taker shares come straight off the table; complier shares are
    differences of per-arm destination proportions. Negative complier
    estimates (monotonicity violated in-sample) are clipped to zero,
    flagged, and the five shares renormalized to sum to one.
    """
    p = takeup.p
    raw = {
        Stratum.ECHS_ALWAYS_TAKER: float(p[0, 0]),
        Stratum.LOW_QUALITY_ALWAYS_TAKER: float(p[1, 1]),
        Stratum.HIGH_QUALITY_ALWAYS_TAKER: float(p[1, 2]),
        Stratum.LOW_QUALITY_COMPLIER: float(p[0, 1] - p[1, 1]),
        Stratum.HIGH_QUALITY_COMPLIER: float(p[0, 2] - p[1, 2]),
    }
    clipped = {s: v < 0 for s, v in raw.items()}
    pi = {s: max(v, 0.0) for s, v in raw.items()}
    total = sum(pi.values())
    if total > 0:
        pi = {s: v / total for s, v in pi.items()}
    return StratumTable(pi=pi, raw=raw, clipped=clipped)


def site_moments(dataset: StudyDataset, site_id: str, weighted: bool = True,
                 eps: float = DEFAULT_COMPLIER_EPS) -> SiteMoments:
    """LATE, complier composition, and aggregates for one site.

    late = (treated mean - control mean) / complier share; phi is the
    high-quality fraction of that share. A site whose complier share is
    at most `eps` is flagged degenerate and carries NaN late/phi rather
    than raising. Raises EmptyArm if the site lacks an arm.
    """
    if site_id not in dataset.site_index:
        raise KeyError(f"unknown site {site_id!r}")
    stats = SiteStatistics(dataset, weighted=weighted, eps=eps)
    k = dataset.site_ids.index(site_id)
    if stats.one_armed[k]:
        missing = 0 if stats.n_eff[k, 0] <= 0 else 1
        raise EmptyArm(missing, site_id)
    return stats.moments(k)


def all_site_moments(dataset: StudyDataset, drop_degenerate: bool = True,
                     weighted: bool = True,
                     eps: float = DEFAULT_COMPLIER_EPS) -> list[SiteMoments]:
    """Site moments for every site, in site order.

    One-armed sites are treated as degenerate rather than fatal. With
    `drop_degenerate` the returned list excludes them (callers can count
    drops by comparing against `dataset.n_sites`). Raises TooFewSites when
    fewer than two usable sites remain.
    """
    if dataset.n_sites < 2:
        raise TooFewSites(f"need at least 2 sites, have {dataset.n_sites}")
    stats = SiteStatistics(dataset, weighted=weighted, eps=eps)
    moments = [stats.moments(k) for k in range(stats.n_sites)]
    if drop_degenerate:
        moments = [m for m in moments if not m.degenerate]
        if len(moments) < 2:
            raise TooFewSites(
                f"only {len(moments)} non-degenerate sites of {dataset.n_sites}"
            )
    return moments


def standardized_difference(dataset: StudyDataset, covariate: str,
                            weighted: bool = True) -> float:
    """Treated-minus-control standardized difference for one covariate.

    Group means are weighted (so sites contribute in proportion to their
    effective size), and the scale is the pooled standard deviation
    sqrt((s1^2 + s0^2) / 2). Raises ZeroVariance when that scale is zero.
    """
    if covariate not in dataset.covariate_names:
        raise KeyError(f"unknown covariate {covariate!r}")
    j = dataset.covariate_names.index(covariate)
    x = dataset.covariates[:, j]
    w = dataset.weight if weighted else np.ones(dataset.n)
    means = []
    variances = []
    for z in (1, 0):
        mask = dataset.arm == z
        wz = w[mask]
        if wz.sum() <= 0:
            raise EmptyArm(z)
        xz = x[mask]
        m = np.average(xz, weights=wz)
        means.append(m)
        variances.append(np.average((xz - m) ** 2, weights=wz))
    pooled = np.sqrt((variances[0] + variances[1]) / 2.0)
    if pooled == 0:
        raise ZeroVariance(f"covariate {covariate!r} has zero pooled variance")
    return float((means[0] - means[1]) / pooled)


def moments_to_arrays(moments: Sequence[SiteMoments]):
    """Stack a list of SiteMoments into the arrays the regression uses.

    Returns (site_ids, late, phi, itt, pi_lc, pi_hc, mass, total_weight,
    cov_matrix, covariate_names).
    """
    if not moments:
        raise TooFewSites("no site moments given")
    names = tuple(moments[0].covariates.keys())
    site_ids = tuple(m.site_id for m in moments)
    late = np.array([m.late for m in moments])
    phi = np.array([m.phi for m in moments])
    itt = np.array([m.itt for m in moments])
    pi_lc = np.array([m.pi_lc for m in moments])
    pi_hc = np.array([m.pi_hc for m in moments])
    mass = np.array([m.complier_mass for m in moments])
    total = np.array([m.total_weight for m in moments])
    covs = np.array([[m.covariates[n] for n in names] for m in moments])
    covs = covs.reshape(len(moments), len(names))
    return site_ids, late, phi, itt, pi_lc, pi_hc, mass, total, covs, names
