"""Within-site case-resampling bootstrap with multiple-imputation combining.

Each replicate redraws students with replacement independently inside
every site (stratified by arm so no replicate loses an arm), recomputes
all site moments, and refits the requested model. Replicate point
estimates and standard errors are combined with the usual multiple
imputation rules: total variance = mean within-replicate variance plus
(1 + 1/B) times the between-replicate variance.

Randomness is keyed by (seed, replicate, site) so results do not depend
on scheduling or on how many other models share the same resamples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats as sps

from .data_model import IndividualRecord, StudyDataset
from .errors import AllReplicatesFailed, BadLevel, StratarcError
from .regression import (
    DesignSpec,
    Estimate,
    FitResult,
    ModelKind,
    fit_itt,
    fit_late,
    population_weighted_effects,
)
from .strata import SiteStatistics

EFFECT_KEYS = ("itt_lc", "itt_hc", "contrast")


@dataclass(frozen=True)
class BootstrapConfig:
    """Replication count, seed, and failure policy.

    With `degenerate_policy="retry"`, a replicate whose fit fails is
    redrawn up to `max_attempts` further times before being dropped.
    """

    replicates: int = 500
    seed: int = 0
    resample_within_arm: bool = True
    degenerate_policy: str = "drop"
    max_attempts: int = 1

    def __post_init__(self):
        if self.replicates < 2:
            raise ValueError("need at least 2 bootstrap replicates")
        if self.degenerate_policy not in ("drop", "retry"):
            raise ValueError(f"unknown degenerate_policy {self.degenerate_policy!r}")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass(frozen=True)
class CombinedEstimate:
    """Multiple-imputation combination of replicate estimates."""

    point: float
    within_var: float
    between_var: float
    total_se: float
    ci_low: float
    ci_high: float
    n_effective_replicates: int

    def to_dict(self) -> dict:
        return {
            "point": self.point,
            "within_var": self.within_var,
            "between_var": self.between_var,
            "total_se": self.total_se,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "n_effective_replicates": self.n_effective_replicates,
        }


@dataclass(frozen=True)
class BootstrapResult:
    estimates: dict[str, CombinedEstimate]
    n_requested: int
    n_failed: int
    degenerate_sites_mean: float
    level: float
    replicate_estimates: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    replicate_ses: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    @property
    def n_effective(self) -> int:
        return self.n_requested - self.n_failed

    def to_dict(self) -> dict:
        return {
            "estimates": {k: v.to_dict() for k, v in self.estimates.items()},
            "n_requested": self.n_requested,
            "n_failed": self.n_failed,
            "n_effective": self.n_effective,
            "degenerate_sites_mean": self.degenerate_sites_mean,
            "level": self.level,
        }


def _z_quantile(level: float) -> float:
    return float(sps.norm.ppf(0.5 + level / 2.0))


def confidence_interval(combined: CombinedEstimate, level: float = 0.95):
    """Normal-theory interval around the combined point estimate."""
    if not 0.0 < level < 1.0:
        raise BadLevel(f"confidence level must be in (0, 1), got {level}")
    z = _z_quantile(level)
    return (combined.point - z * combined.total_se,
            combined.point + z * combined.total_se)


def combine_rubin(points: Sequence[float], ses: Sequence[float],
                  level: float = 0.95) -> CombinedEstimate:
    """Combine replicate (estimate, se) pairs into a single estimate."""
    pts = np.asarray(points, dtype=np.float64)
    ses = np.asarray(ses, dtype=np.float64)
    if len(pts) < 2:
        raise AllReplicatesFailed(
            f"need at least 2 effective replicates, have {len(pts)}"
        )
    if not 0.0 < level < 1.0:
        raise BadLevel(f"confidence level must be in (0, 1), got {level}")
    b = len(pts)
    point = float(pts.mean())
    within = float(np.mean(ses ** 2))
    between = float(np.var(pts, ddof=1))
    total_se = float(np.sqrt(within + (1.0 + 1.0 / b) * between))
    z = _z_quantile(level)
    return CombinedEstimate(
        point=point,
        within_var=within,
        between_var=between,
        total_se=total_se,
        ci_low=point - z * total_se,
        ci_high=point + z * total_se,
        n_effective_replicates=b,
    )


# ---------------------------------------------------------------------------
# resampling

def _site_groups(dataset: StudyDataset, within_arm: bool) -> list[list[np.ndarray]]:
    """Per-site lists of index groups to resample within."""
    groups = []
    for sid in dataset.site_ids:
        idx = dataset.site_index[sid]
        if within_arm:
            groups.append([idx[dataset.arm[idx] == 0], idx[dataset.arm[idx] == 1]])
        else:
            groups.append([idx])
    return groups


def _draw_group(group: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(group)
    if n == 0:
        return group
    return group[rng.integers(0, n, size=n)]


def _replicate_indices(groups: list[list[np.ndarray]], seed: int, b: int,
                       attempt: int) -> np.ndarray:
    parts = []
    for site_idx, site_groups in enumerate(groups):
        key = [seed, b, site_idx] if attempt == 0 else [seed, b, site_idx, attempt]
        rng = np.random.default_rng(key)
        for grp in site_groups:
            parts.append(_draw_group(grp, rng))
    return np.concatenate(parts)


def resample_site(records: Sequence[IndividualRecord], rng: np.random.Generator,
                  within_arm: bool = True) -> list[IndividualRecord]:
    """Resample one site's records with replacement.

    With `within_arm` the control and treatment groups are resampled
    separately (in that order), so per-arm counts are preserved. Weights
    travel with the sampled records.
    """
    records = list(records)
    if within_arm:
        groups = [
            np.array([i for i, r in enumerate(records) if int(r.arm) == 0], dtype=int),
            np.array([i for i, r in enumerate(records) if int(r.arm) == 1], dtype=int),
        ]
    else:
        groups = [np.arange(len(records))]
    out: list[IndividualRecord] = []
    for grp in groups:
        for i in _draw_group(grp, rng):
            out.append(records[i])
    return out


# ---------------------------------------------------------------------------
# bootstrap estimation

@dataclass(frozen=True)
class BootstrapTask:
    """One model to refit on every shared resample."""

    spec: DesignSpec
    hc: str = "hc1"
    target: str = "site"
    site_weights: str | None = None


def _task_effects(moments, task: BootstrapTask) -> dict[str, Estimate]:
    if task.spec.model is ModelKind.ITT:
        fit = fit_itt(moments, task.spec, hc=task.hc, site_weights=task.site_weights)
        return dict(fit.effects)
    fit = fit_late(moments, task.spec, hc=task.hc, site_weights=task.site_weights)
    if task.target == "population":
        pop = population_weighted_effects(fit)
        return {"itt_lc": pop.itt_lc, "itt_hc": pop.itt_hc, "contrast": pop.contrast}
    return dict(fit.effects)


def run_bootstrap_tasks(dataset: StudyDataset, tasks: dict[str, BootstrapTask],
                        cfg: BootstrapConfig, weighted: bool = True):
    """Run all tasks over shared per-replicate resamples.

    Returns (per-task arrays, degenerate-site counts). Each task maps to
    {"points": {effect: array}, "ses": {...}, "failed": int} with NaN in
    failed replicate slots.
    """
    groups = _site_groups(dataset, cfg.resample_within_arm)
    b_total = cfg.replicates
    out = {
        name: {
            "points": {k: np.full(b_total, np.nan) for k in EFFECT_KEYS},
            "ses": {k: np.full(b_total, np.nan) for k in EFFECT_KEYS},
            "failed": 0,
        }
        for name in tasks
    }
    degenerate_counts = np.zeros(b_total)
    max_extra = cfg.max_attempts if cfg.degenerate_policy == "retry" else 0

    for b in range(b_total):
        idx = _replicate_indices(groups, cfg.seed, b, attempt=0)
        stats = SiteStatistics(dataset, idx, weighted=weighted)
        keep = ~stats.degenerate
        degenerate_counts[b] = int((~keep).sum())
        shared = [stats.moments(k) for k in range(stats.n_sites) if keep[k]]
        for name, task in tasks.items():
            effects = None
            try:
                effects = _task_effects(shared, task)
            except (StratarcError, ValueError):
                for attempt in range(1, max_extra + 1):
                    retry_idx = _replicate_indices(groups, cfg.seed, b, attempt)
                    retry_stats = SiteStatistics(dataset, retry_idx, weighted=weighted)
                    retry_keep = ~retry_stats.degenerate
                    retry_moments = [retry_stats.moments(k)
                                     for k in range(retry_stats.n_sites)
                                     if retry_keep[k]]
                    try:
                        effects = _task_effects(retry_moments, task)
                        break
                    except (StratarcError, ValueError):
                        continue
            if effects is None:
                out[name]["failed"] += 1
                continue
            for key in EFFECT_KEYS:
                out[name]["points"][key][b] = effects[key].value
                out[name]["ses"][key][b] = effects[key].se
    return out, degenerate_counts


def bootstrap_fit(dataset: StudyDataset, spec: DesignSpec, cfg: BootstrapConfig,
                  hc: str = "hc1", target: str = "site",
                  site_weights: str | None = None, level: float = 0.95,
                  weighted: bool = True) -> BootstrapResult:
    """Bootstrap the full pipeline and combine with imputation rules.

    Replicates whose fit fails (rank deficiency, too few usable sites,
    and so on) are handled per the config policy and reported through
    `n_failed` / `n_effective`. Raises AllReplicatesFailed when fewer
    than two replicates survive.
    """
    if not 0.0 < level < 1.0:
        raise BadLevel(f"confidence level must be in (0, 1), got {level}")
    task = BootstrapTask(spec=spec, hc=hc, target=target, site_weights=site_weights)
    raw, degenerate_counts = run_bootstrap_tasks(dataset, {"fit": task}, cfg,
                                                 weighted=weighted)
    points = raw["fit"]["points"]
    ses = raw["fit"]["ses"]
    ok = ~np.isnan(points["itt_lc"])
    if ok.sum() < 2:
        raise AllReplicatesFailed(
            f"{int(ok.sum())} of {cfg.replicates} bootstrap replicates produced a fit"
        )
    estimates = {
        key: combine_rubin(points[key][ok], ses[key][ok], level=level)
        for key in EFFECT_KEYS
    }
    return BootstrapResult(
        estimates=estimates,
        n_requested=cfg.replicates,
        n_failed=int(cfg.replicates - ok.sum()),
        degenerate_sites_mean=float(degenerate_counts.mean()),
        level=level,
        replicate_estimates={k: points[k][ok] for k in EFFECT_KEYS},
        replicate_ses={k: ses[k][ok] for k in EFFECT_KEYS},
    )
