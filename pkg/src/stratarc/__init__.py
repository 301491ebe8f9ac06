"""stratarc: principal causal effects in multi-site randomized trials.

Estimates complier-type treatment effects by regressing per-site effect
estimates on per-site complier composition, with heteroskedasticity-
robust uncertainty, a within-site case-resampling bootstrap, covariate
adjustment, residual diagnostics, and a Monte Carlo harness.
"""

from .data_model import (
    Arm,
    ColumnSchema,
    Destination,
    IndividualRecord,
    Stratum,
    StudyDataset,
    ingest_csv,
    validate,
    write_csv,
)
from .strata import (
    SiteMoments,
    StratumTable,
    TakeUpTable,
    all_site_moments,
    site_moments,
    standardized_difference,
    stratum_proportions,
    take_up_proportions,
)
from .regression import (
    DesignSpec,
    Estimate,
    FitResult,
    ModelKind,
    Parameterization,
    fit_itt,
    fit_late,
    ols_fit,
    overall_decomposition_check,
    population_weighted_effects,
    reparameterize,
)
from .bootstrap import (
    BootstrapConfig,
    BootstrapResult,
    CombinedEstimate,
    bootstrap_fit,
    combine_rubin,
    confidence_interval,
    resample_site,
)
from .diagnostics import (
    ResidualDiagnostics,
    plot_data,
    residual_diagnostics,
    residual_slope_test,
)
from .simulation import (
    ConfounderSpec,
    DgpSpec,
    MonteCarloReport,
    PhiMap,
    PotentialOutcomeSchedule,
    SiteTruth,
    generate_calibrated,
    generate_simple,
    oracle_moments,
    run_monte_carlo,
    synthetic_echs_template,
)

__version__ = "0.1.0"
