import numpy as np
import pytest

from conftest import E, HQ, LQ, build_dataset

from stratarc import (
    DesignSpec,
    ModelKind,
    Parameterization,
    SiteMoments,
    fit_itt,
    fit_late,
    ols_fit,
    overall_decomposition_check,
    population_weighted_effects,
    reparameterize,
)
from stratarc.errors import (
    IncompatibleSpec,
    NoPhiVariation,
    RankDeficient,
    TooFewSites,
    ZeroTotalMass,
)

TWO = Parameterization.TWO_SLOPE
IPHI = Parameterization.INTERCEPT_PHI
IPHIC = Parameterization.INTERCEPT_PHI_COMP


# ---------------------------------------------------------------------------
# an independent oracle: normal equations by Gaussian elimination, sandwich
# by explicit summation. No shared code with the library path.

def gauss_solve(a, b):
    n = len(b)
    a = [row[:] + [b[i]] for i, row in enumerate(a)]
    for col in range(n):
        pivot = max(range(col, n), key=lambda r: abs(a[r][col]))
        a[col], a[pivot] = a[pivot], a[col]
        for r in range(col + 1, n):
            f = a[r][col] / a[col][col]
            for c in range(col, n + 1):
                a[r][c] -= f * a[col][c]
    x = [0.0] * n
    for r in range(n - 1, -1, -1):
        s = a[r][n] - sum(a[r][c] * x[c] for c in range(r + 1, n))
        x[r] = s / a[r][r]
    return x


def oracle_ols(X, y, w=None, hc="hc1"):
    k = len(y)
    p = len(X[0])
    w = [1.0] * k if w is None else list(w)
    xtx = [[sum(w[i] * X[i][a] * X[i][b] for i in range(k)) for b in range(p)]
           for a in range(p)]
    xty = [sum(w[i] * X[i][a] * y[i] for i in range(k)) for a in range(p)]
    beta = gauss_solve([row[:] for row in xtx], xty)
    resid = [y[i] - sum(X[i][a] * beta[a] for a in range(p)) for i in range(k)]
    # invert xtx column by column
    inv = [gauss_solve([row[:] for row in xtx],
                       [1.0 if j == a else 0.0 for j in range(p)])
           for a in range(p)]
    inv = [[inv[b][a] for b in range(p)] for a in range(p)]  # transpose back
    meat = [[sum((w[i] * resid[i]) ** 2 * X[i][a] * X[i][b] for i in range(k))
             for b in range(p)] for a in range(p)]
    tmp = [[sum(inv[a][c] * meat[c][b] for c in range(p)) for b in range(p)]
           for a in range(p)]
    vcov = [[sum(tmp[a][c] * inv[c][b] for c in range(p)) for b in range(p)]
            for a in range(p)]
    if hc == "hc1" and k > p:
        vcov = [[v * k / (k - p) for v in row] for row in vcov]
    return beta, vcov, resid


def random_instance(rng):
    k = int(rng.integers(3, 13))
    p = int(rng.integers(1, min(k, 5)))
    X = rng.normal(size=(k, p))
    y = rng.normal(size=k)
    w = rng.uniform(0.5, 2.0, size=k) if rng.random() < 0.5 else None
    return X, y, w


# ---------------------------------------------------------------------------
# ols_fit

def test_mean_model():
    y = np.array([0.3, -0.1, 0.8, 0.2])
    fit = ols_fit(np.ones((4, 1)), y)
    assert fit.coef[0] == pytest.approx(y.mean(), abs=1e-14)
    assert fit.residuals.sum() == pytest.approx(0.0, abs=1e-12)


def test_ols_matches_oracle_five_points():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(5, 2))
    y = rng.normal(size=5)
    fit = ols_fit(X, y, hc="hc0")
    beta, vcov, _ = oracle_ols(X.tolist(), y.tolist(), hc="hc0")
    np.testing.assert_allclose(fit.coef, beta, rtol=1e-10)
    np.testing.assert_allclose(fit.vcov, vcov, rtol=1e-10, atol=1e-14)


def test_ols_oracle_sweep():
    rng = np.random.default_rng(101)
    for _ in range(100):
        X, y, w = random_instance(rng)
        for hc in ("hc0", "hc1"):
            fit = ols_fit(X, y, weights=w, hc=hc)
            beta, vcov, _ = oracle_ols(X.tolist(), y.tolist(),
                                       None if w is None else w.tolist(), hc)
            np.testing.assert_allclose(fit.coef, beta, rtol=1e-9, atol=1e-12)
            np.testing.assert_allclose(fit.vcov, vcov, rtol=1e-8, atol=1e-12)


def test_hc1_is_scaled_hc0():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(9, 3))
    y = rng.normal(size=9)
    f0 = ols_fit(X, y, hc="hc0")
    f1 = ols_fit(X, y, hc="hc1")
    np.testing.assert_allclose(f1.vcov, f0.vcov * (9 / 6), rtol=0, atol=0)


def test_zero_column_rank_deficient():
    X = np.column_stack([np.ones(5), np.zeros(5)])
    with pytest.raises(RankDeficient) as err:
        ols_fit(X, np.arange(5.0), column_names=["one", "dead"])
    assert "dead" in err.value.columns


def test_collinear_rank_deficient():
    x = np.arange(5.0)
    X = np.column_stack([x, 2 * x])
    with pytest.raises(RankDeficient):
        ols_fit(X, np.ones(5))


def test_too_few_rows():
    with pytest.raises(TooFewSites):
        ols_fit(np.ones((2, 3)), np.ones(2))


def test_residual_orthogonality():
    rng = np.random.default_rng(8)
    for _ in range(30):
        X, y, w = random_instance(rng)
        fit = ols_fit(X, y, weights=w)
        ww = np.ones(len(y)) if w is None else w
        scale = np.abs(X).max() * np.abs(y).max() + 1.0
        for j in range(X.shape[1]):
            assert abs((ww * fit.residuals) @ X[:, j]) <= 1e-9 * scale


# ---------------------------------------------------------------------------
# moments helpers

def make_moments(late, phi, mass=None, covs=None, cov_names=(), itt=None,
                 pi_c=0.8):
    out = []
    k = len(late)
    mass = mass if mass is not None else [100.0] * k
    for i in range(k):
        phi_i = phi[i]
        cdict = {n: covs[i][j] for j, n in enumerate(cov_names)} if cov_names else {}
        out.append(SiteMoments(
            site_id=f"s{i}", late=float(late[i]), phi=float(phi_i),
            itt=float(itt[i]) if itt is not None else float(late[i]) * pi_c,
            pi_lc=pi_c * (1 - phi_i), pi_hc=pi_c * phi_i,
            complier_mass=float(mass[i]), covariates=cdict,
            n_treated=60.0, n_control=60.0, degenerate=False, clipped=False,
        ))
    return out


def test_constant_late_interpolates():
    m = make_moments([0.17] * 6, [0.1, 0.2, 0.4, 0.5, 0.7, 0.9])
    fit = fit_late(m, DesignSpec())
    assert fit.effects["itt_lc"].value == pytest.approx(0.17, abs=1e-12)
    assert fit.effects["itt_hc"].value == pytest.approx(0.17, abs=1e-12)
    np.testing.assert_allclose(fit.residuals, 0, atol=1e-12)


def test_two_site_slope_formula():
    m = make_moments([0.10, 0.30], [0.3, 0.8])
    fit = fit_late(m, DesignSpec())
    contrast = (0.30 - 0.10) / (0.8 - 0.3)
    assert fit.effects["contrast"].value == pytest.approx(contrast, abs=1e-12)
    assert fit.effects["itt_lc"].value == pytest.approx(0.10 - 0.3 * contrast, abs=1e-12)
    np.testing.assert_allclose(fit.residuals, 0, atol=1e-12)
    assert fit.dof == 0


def test_all_zero_phi_rank_deficient():
    m = make_moments([0.1, 0.2, 0.3], [0.0, 0.0, 0.0])
    with pytest.raises(RankDeficient):
        fit_late(m, DesignSpec())


def test_constant_phi_no_variation():
    m = make_moments([0.1, 0.2, 0.3], [0.5, 0.5, 0.5])
    with pytest.raises(NoPhiVariation):
        fit_late(m, DesignSpec())


def test_fit_late_equals_manual_assembly():
    rng = np.random.default_rng(21)
    k = 38
    phi = rng.uniform(0, 1, k)
    late = 0.06 + 0.05 * phi + rng.normal(0, 0.03, k)
    x = rng.normal(size=k)
    m = make_moments(late, phi, covs=x[:, None], cov_names=("x",))
    spec = DesignSpec(model=ModelKind.LATE_ADJUSTED, covariate_names=("x",))
    fit = fit_late(m, spec)
    # manual: same design, grand-mean centered covariate
    total = np.array([mm.total_weight for mm in m])
    xc = x - (total @ x) / total.sum()
    X = np.column_stack([1 - phi, phi, xc])
    ref = ols_fit(X, late, hc="hc1")
    np.testing.assert_allclose(fit.coef, ref.coef, atol=1e-12)
    np.testing.assert_allclose(fit.vcov, ref.vcov, atol=1e-12)


def test_weighted_fit_matches_oracle():
    rng = np.random.default_rng(33)
    k = 9
    phi = rng.uniform(0.05, 0.95, k)
    late = rng.normal(0.1, 0.05, k)
    mass = rng.uniform(20, 200, k)
    m = make_moments(late, phi, mass=mass)
    fit = fit_late(m, DesignSpec(), site_weights="complier-mass")
    X = [[1 - p, p] for p in phi]
    beta, vcov, _ = oracle_ols(X, late.tolist(), mass.tolist(), "hc1")
    np.testing.assert_allclose(fit.coef, beta, rtol=1e-10)
    np.testing.assert_allclose(fit.vcov, vcov, rtol=1e-9)


def test_fit_itt_full_compliance_rank_deficient():
    m = make_moments([0.1, 0.2, 0.3], [0.0, 0.0, 0.0], pi_c=1.0)
    with pytest.raises(RankDeficient):
        fit_itt(m)


def test_fit_itt_matches_oracle():
    m = make_moments([0.1, 0.25, 0.2], [0.2, 0.5, 0.7], itt=[0.08, 0.20, 0.17])
    fit = fit_itt(m)
    X = [[mm.pi_lc, mm.pi_hc] for mm in m]
    beta, vcov, _ = oracle_ols(X, [mm.itt for mm in m], None, "hc1")
    np.testing.assert_allclose(fit.coef, beta, rtol=1e-10)
    np.testing.assert_allclose(fit.vcov, vcov, rtol=1e-9)


# ---------------------------------------------------------------------------
# parameterizations

def _ten_site_moments(with_cov=True, seed=4):
    rng = np.random.default_rng(seed)
    phi = rng.uniform(0.05, 0.95, 10)
    x = rng.normal(size=(10, 2))
    late = 0.05 + 0.04 * phi + 0.02 * x[:, 0] + rng.normal(0, 0.02, 10)
    names = ("read", "frl") if with_cov else ()
    return make_moments(late, phi, covs=x if with_cov else None, cov_names=names)


@pytest.mark.parametrize("model,covs", [
    (ModelKind.LATE_UNADJUSTED, ()),
    (ModelKind.LATE_ADJUSTED, ("read", "frl")),
    (ModelKind.LATE_INTERACTION, ("read", "frl")),
])
def test_parameterization_equivalence(model, covs):
    m = _ten_site_moments(with_cov=bool(covs))
    fits = {
        par: fit_late(m, DesignSpec(model=model, parameterization=par,
                                    covariate_names=covs))
        for par in (TWO, IPHI, IPHIC)
    }
    ref = fits[TWO]
    for par, fit in fits.items():
        for key in ("itt_lc", "itt_hc", "contrast"):
            assert fit.effects[key].value == pytest.approx(
                ref.effects[key].value, abs=1e-10), (par, key)
            assert fit.effects[key].se == pytest.approx(
                ref.effects[key].se, abs=1e-10), (par, key)
        np.testing.assert_allclose(fit.residuals, ref.residuals, atol=1e-10)


def test_reparameterize_linear_map():
    m = make_moments([0.08, 0.05, 0.065, 0.071], [0.1, 0.9, 0.4, 0.6])
    fit = fit_late(m, DesignSpec())
    beta_lc, beta_hc = fit.coef
    iphi = reparameterize(fit, IPHI)
    assert iphi.coefficients["intercept"] == pytest.approx(beta_lc, abs=1e-12)
    assert iphi.coefficients["phi"] == pytest.approx(beta_hc - beta_lc, abs=1e-12)
    # round trip
    back = reparameterize(iphi, TWO)
    np.testing.assert_allclose(back.coef, fit.coef, atol=1e-12)
    np.testing.assert_allclose(back.vcov, fit.vcov, atol=1e-12)


def test_reparameterize_matches_direct_fit():
    m = _ten_site_moments()
    spec = DesignSpec(model=ModelKind.LATE_ADJUSTED, covariate_names=("read", "frl"))
    two = fit_late(m, spec)
    direct = fit_late(m, DesignSpec(model=ModelKind.LATE_ADJUSTED,
                                    covariate_names=("read", "frl"),
                                    parameterization=IPHI))
    mapped = reparameterize(two, IPHI)
    np.testing.assert_allclose(mapped.coef, direct.coef, atol=1e-10)
    np.testing.assert_allclose(mapped.vcov, direct.vcov, atol=1e-10)
    # contrast SE from the two-slope vcov equals the slope SE fitted directly
    assert two.effects["contrast"].se == pytest.approx(
        np.sqrt(direct.vcov[1, 1]), abs=1e-10)


def test_reparameterize_itt_incompatible():
    m = make_moments([0.1, 0.25, 0.2], [0.2, 0.5, 0.7])
    fit = fit_itt(m)
    with pytest.raises(IncompatibleSpec):
        reparameterize(fit, IPHI)


def test_affine_equivariance():
    m = _ten_site_moments(with_cov=False)
    spec = DesignSpec(parameterization=IPHI)
    base = fit_late(m, spec)
    a, b = 2.5, -0.3
    shifted = [SiteMoments(**{**mm.__dict__, "late": a * mm.late + b}) for mm in m]
    fit2 = fit_late(shifted, spec)
    assert fit2.effects["contrast"].value == pytest.approx(
        a * base.effects["contrast"].value, abs=1e-10)


# ---------------------------------------------------------------------------
# population weighting

def test_population_collapses_to_coefficients():
    m = make_moments([0.1, 0.2, 0.15, 0.12], [0.2, 0.6, 0.4, 0.8],
                     mass=[50.0] * 4)
    fit = fit_late(m, DesignSpec())
    pop = population_weighted_effects(fit)
    assert pop.itt_lc.value == pytest.approx(fit.effects["itt_lc"].value, abs=1e-12)
    assert pop.itt_hc.value == pytest.approx(fit.effects["itt_hc"].value, abs=1e-12)
    assert pop.itt_lc.se == pytest.approx(fit.effects["itt_lc"].se, abs=1e-12)


def test_population_weighting_spreadsheet():
    """Five sites, unequal masses: matches direct summation."""
    rng = np.random.default_rng(12)
    phi = np.array([0.1, 0.35, 0.5, 0.75, 0.9])
    x = rng.normal(size=(5, 1))
    late = 0.05 + 0.1 * phi + 0.03 * x[:, 0]
    mass = np.array([10.0, 80.0, 25.0, 150.0, 60.0])
    m = make_moments(late, phi, mass=mass, covs=x, cov_names=("read",))
    spec = DesignSpec(model=ModelKind.LATE_INTERACTION, covariate_names=("read",),
                      interaction_covariate="read")
    fit = fit_late(m, spec)
    pop = population_weighted_effects(fit)

    beta_lc, beta_hc, d_lc, d_hc = (fit.coefficients["beta_lc"],
                                    fit.coefficients["beta_hc"],
                                    fit.coefficients["lc:read"],
                                    fit.coefficients["hc:read"])
    total = np.array([mm.total_weight for mm in m])
    xc = x[:, 0] - (total @ x[:, 0]) / total.sum()
    w_lc = (1 - phi) * mass
    w_hc = phi * mass
    manual_lc = sum((beta_lc + d_lc * xc[i]) * w_lc[i] for i in range(5)) / w_lc.sum()
    manual_hc = sum((beta_hc + d_hc * xc[i]) * w_hc[i] for i in range(5)) / w_hc.sum()
    assert pop.itt_lc.value == pytest.approx(manual_lc, abs=1e-12)
    assert pop.itt_hc.value == pytest.approx(manual_hc, abs=1e-12)
    # SE via explicit a' V a with the same weights
    a = np.zeros(len(fit.coef))
    a[0] = 1.0
    a[2] = (w_lc @ xc) / w_lc.sum()
    se = np.sqrt(a @ fit.vcov @ a)
    assert pop.itt_lc.se == pytest.approx(se, abs=1e-12)


def test_population_zero_mass():
    m = make_moments([0.1, 0.2, 0.15], [0.0, 0.5, 0.9], mass=[0.0, 0.0, 0.0])
    fit = fit_late(m, DesignSpec())
    with pytest.raises(ZeroTotalMass):
        population_weighted_effects(fit)


def test_population_weighting_parameterization_invariant():
    m = _ten_site_moments()
    spec = DesignSpec(model=ModelKind.LATE_INTERACTION,
                      covariate_names=("read", "frl"), interaction_covariate="read")
    pops = [population_weighted_effects(
        fit_late(m, DesignSpec(model=spec.model, parameterization=par,
                               covariate_names=spec.covariate_names,
                               interaction_covariate="read")))
        for par in (TWO, IPHI, IPHIC)]
    for pop in pops[1:]:
        assert pop.itt_lc.value == pytest.approx(pops[0].itt_lc.value, abs=1e-10)
        assert pop.itt_hc.se == pytest.approx(pops[0].itt_hc.se, abs=1e-10)


# ---------------------------------------------------------------------------
# overall decomposition

def test_decomposition_full_compliance():
    ds = build_dataset(
        [("a", 1, E, 1)] * 7 + [("a", 1, E, 0)] * 3
        + [("a", 0, LQ, 1)] * 5 + [("a", 0, LQ, 0)] * 5
    )
    diff = 0.7 - 0.5
    report = overall_decomposition_check(ds, itt_lc=diff, itt_hc=0.0)
    assert report.overall_itt == pytest.approx(diff, abs=1e-12)
    assert report.overall_late == pytest.approx(diff, abs=1e-12)
    assert report.reconstruction == pytest.approx(diff, abs=1e-12)
    assert report.late_defined


def test_decomposition_no_compliers():
    ds = build_dataset([("a", 1, E, 1), ("a", 0, E, 0),
                        ("b", 1, LQ, 1), ("b", 0, LQ, 0)])
    report = overall_decomposition_check(ds, itt_lc=0.1, itt_hc=0.1)
    assert not report.late_defined
    assert np.isnan(report.overall_late)


def test_unadjusted_rejects_covariates():
    with pytest.raises(IncompatibleSpec):
        DesignSpec(model=ModelKind.LATE_UNADJUSTED, covariate_names=("x",))
    with pytest.raises(IncompatibleSpec):
        DesignSpec(model=ModelKind.LATE_ADJUSTED, covariate_names=("x",),
                   interaction_covariate="x")
