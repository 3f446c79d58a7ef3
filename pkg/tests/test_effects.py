"""Treatment-effect machinery: profiles, MTEs, 2SRI, RDD, panel wrapper."""

import math

import numpy as np
import pandas as pd
import pytest

from distreg.design import DesignError, assemble_design, build_formula_set
from distreg.effects import (
    EffectError,
    RddSpec,
    TsriSpec,
    WeakInstrumentWarning,
    average_marginal_effects,
    conditional_density_curves,
    covariate_profile,
    frd_fit,
    mte,
    panel_fit,
    srd_fit,
    tsri_fit,
)
from distreg.families import get_family
from distreg.fit import fit
from distreg.functionals import FunctionalKind

MEAN = FunctionalKind.parse("mean")
VARIANCE = FunctionalKind.parse("variance")
GINI = FunctionalKind.parse("gini")


def fit_formulas(family_name, formulas, df, response="y"):
    fam = get_family(family_name)
    fs = build_formula_set(formulas, fam.param_names)
    design = assemble_design(fs, df, categorical=set())
    return fit(fam, design, np.asarray(df[response], dtype=float))


# ---------------------------------------------------------------------------
# Profiles
# ---------------------------------------------------------------------------


def test_profile_means_and_modes():
    df = pd.DataFrame({"x": [1.0, 2.0, 3.0], "g": ["a", "a", "b"]})
    prof = covariate_profile(df)
    assert prof.values["x"] == 2.0
    assert prof.provenance["x"] == "mean"
    assert prof.values["g"] == "a"
    assert prof.provenance["g"] == "mode"


def test_profile_mode_tie_breaks_lexicographically():
    df = pd.DataFrame({"g": ["b", "b", "a", "a"]})
    assert covariate_profile(df).values["g"] == "a"


def test_profile_user_overrides():
    df = pd.DataFrame({"x": [1.0, 3.0]})
    prof = covariate_profile(df, overrides={"x": 9.0})
    assert prof.values["x"] == 9.0
    assert prof.provenance["x"] == "user"


def test_profile_empty_data_rejected():
    with pytest.raises(EffectError):
        covariate_profile(pd.DataFrame({"x": []}))


# ---------------------------------------------------------------------------
# Marginal treatment effects
# ---------------------------------------------------------------------------


def simulate_lognormal_rct(n, seed, beta_t_mu=0.3, beta_t_sigma=0.0):
    rng = np.random.default_rng(seed)
    T = rng.integers(0, 2, n).astype(float)
    x = rng.normal(size=n)
    mu = 0.5 + beta_t_mu * T + 0.2 * x
    sigma = np.exp(-0.4 + beta_t_sigma * T)
    y = np.exp(rng.normal(mu, sigma))
    return pd.DataFrame({"y": y, "T": T, "x": x})


def test_mte_zero_when_treatment_absent():
    df = simulate_lognormal_rct(800, 1, beta_t_mu=0.4)
    # model that never saw the treatment: toggling it changes nothing
    model = fit_formulas("lognormal", {"mu": "1 + x", "sigma": "1"}, df)
    prof = covariate_profile(df.drop(columns="y"))
    for fk in (MEAN, VARIANCE, GINI):
        est = mte(model, prof, fk, "T")
        assert est.difference == 0.0
        assert est.treated == est.control


def test_mte_on_mean_closed_form_recovery():
    # E[Y|T] = exp(mu(T) + sigma^2/2): the mean MTE has a closed form
    truth_fn = lambda b0, bt, bx, x, s: math.exp(b0 + bx * x + s**2 / 2) * (math.exp(bt) - 1)
    ests, truths = [], []
    for seed in range(8):
        df = simulate_lognormal_rct(4000, 100 + seed)
        model = fit_formulas("lognormal", {"mu": "1 + T + x", "sigma": "1"}, df)
        prof = covariate_profile(df.drop(columns="y"))
        est = mte(model, prof, MEAN, "T")
        ests.append(est.difference)
        truths.append(truth_fn(0.5, 0.3, 0.2, prof.values["x"], math.exp(-0.4)))
    ests = np.asarray(ests)
    se = ests.std(ddof=1) / math.sqrt(len(ests))
    assert abs(ests.mean() - np.mean(truths)) <= 3 * se + 1e-3


def test_mte_antisymmetry_under_recoding():
    df = simulate_lognormal_rct(3000, 7)
    model = fit_formulas("lognormal", {"mu": "1 + T + x", "sigma": "1 + T"}, df)
    df_sw = df.assign(T=1.0 - df["T"])
    model_sw = fit_formulas("lognormal", {"mu": "1 + T + x", "sigma": "1 + T"}, df_sw)
    prof = covariate_profile(df.drop(columns="y"))
    for fk in (MEAN, GINI):
        e = mte(model, prof, fk, "T")
        e_sw = mte(model_sw, prof, fk, "T")
        assert e_sw.difference == pytest.approx(-e.difference, abs=1e-6)
        assert e_sw.treated == pytest.approx(e.control, abs=1e-6)


def test_mte_profile_determinism():
    df = simulate_lognormal_rct(500, 3)
    model = fit_formulas("lognormal", {"mu": "1 + T + x", "sigma": "1"}, df)
    p1 = covariate_profile(df.drop(columns="y"))
    p2 = covariate_profile(df.drop(columns="y"))
    assert p1 == p2
    assert mte(model, p1, MEAN, "T").difference == mte(model, p2, MEAN, "T").difference


def test_mte_propagates_functional_failure_with_arm():
    rng = np.random.default_rng(11)
    n = 2000
    T = rng.integers(0, 2, n).astype(float)
    fam = get_family("singh-maddala")
    # the treated arm's tail index sigma*tau drops far below 1: no mean there
    b = np.exp(1.0 + 0.0 * T)
    a = np.exp(0.55)
    q = np.exp(0.05 - 1.3 * T)
    y = fam.sample((b, np.full(n, a), q), rng)
    df = pd.DataFrame({"y": y, "T": T})
    model = fit_formulas("singh-maddala", {"mu": "1", "sigma": "1", "tau": "1 + T"}, df)
    prof = covariate_profile(df.drop(columns="y"))
    pred = model.predict_parameters(prof.row(T=1.0))
    assert float(pred["sigma"][0] * pred["tau"][0]) < 1.0
    with pytest.raises(EffectError, match="T=1"):
        mte(model, prof, MEAN, "T")


def test_mte_requires_binary_treatment():
    df = pd.DataFrame({"y": np.random.default_rng(0).normal(size=50),
                       "T": np.linspace(0, 2, 50)})
    model = fit_formulas("normal", {"mu": "1 + T", "sigma": "1"}, df)
    with pytest.raises(EffectError):
        average_marginal_effects(model, df, MEAN, "T")


# ---------------------------------------------------------------------------
# Average marginal effects
# ---------------------------------------------------------------------------


def test_ame_homogeneous_identity_link_effects_equal():
    rng = np.random.default_rng(4)
    n = 300
    df = pd.DataFrame({
        "T": rng.integers(0, 2, n).astype(float),
        "x": rng.normal(size=n),
    })
    df["y"] = 2.0 + 1.5 * df["T"] + 0.3 * df["x"] + rng.normal(scale=0.5, size=n)
    model = fit_formulas("normal", {"mu": "1 + T + x", "sigma": "1"}, df)
    res = average_marginal_effects(model, df, MEAN, "T")
    assert np.ptp(res.effects) < 1e-10
    assert res.mean == pytest.approx(model.coef["mu"][1], abs=1e-10)
    assert res.n_failed == 0


def test_ame_mean_equals_population_average_effect_identity_link():
    rng = np.random.default_rng(5)
    n = 400
    df = pd.DataFrame({
        "T": rng.integers(0, 2, n).astype(float),
        "x": rng.normal(size=n),
    })
    df["y"] = 1.0 + 0.8 * df["T"] + 0.5 * df["x"] - 0.4 * df["T"] * df["x"] \
        + rng.normal(scale=0.5, size=n)
    model = fit_formulas("normal", {"mu": "1 + T + x + T:x", "sigma": "1"}, df)
    res = average_marginal_effects(model, df, MEAN, "T")
    # oracle: with identity mu, averaging row effects = effect on the average
    arm1, arm0 = df.copy(), df.copy()
    arm1["T"], arm0["T"] = 1.0, 0.0
    mu1 = model.predict_parameters(arm1)["mu"]
    mu0 = model.predict_parameters(arm0)["mu"]
    assert res.mean == pytest.approx(float(np.mean(mu1 - mu0)), abs=1e-10)


def test_ame_rejects_empty():
    df = simulate_lognormal_rct(200, 6)
    model = fit_formulas("lognormal", {"mu": "1 + T", "sigma": "1"}, df)
    with pytest.raises(EffectError):
        average_marginal_effects(model, df.iloc[:0], MEAN, "T")


# ---------------------------------------------------------------------------
# Conditional density curves
# ---------------------------------------------------------------------------


def test_density_curves_normalize_and_shift():
    df = simulate_lognormal_rct(4000, 9, beta_t_mu=0.5)
    model = fit_formulas("lognormal", {"mu": "1 + T + x", "sigma": "1"}, df)
    prof = covariate_profile(df.drop(columns="y"))
    grid = np.linspace(1e-6, 30.0, 4000)
    curves = conditional_density_curves(
        model, {"treated": prof.row(T=1.0), "control": prof.row(T=0.0)}, grid
    )
    for label, dens in curves.items():
        assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-3)
    # treated arm shifted right: its median exceeds the control median
    cum_t = np.cumsum(curves["treated"]) * (grid[1] - grid[0])
    cum_c = np.cumsum(curves["control"]) * (grid[1] - grid[0])
    med_t = grid[np.searchsorted(cum_t, 0.5)]
    med_c = grid[np.searchsorted(cum_c, 0.5)]
    assert med_t > med_c


def test_density_curves_identical_without_effect():
    df = simulate_lognormal_rct(1500, 10, beta_t_mu=0.0)
    model = fit_formulas("lognormal", {"mu": "1 + x", "sigma": "1"}, df)
    prof = covariate_profile(df.drop(columns="y"))
    grid = np.linspace(0.1, 10.0, 200)
    curves = conditional_density_curves(
        model, {"t": prof.row(T=1.0), "c": prof.row(T=0.0)}, grid
    )
    np.testing.assert_array_equal(curves["t"], curves["c"])


# ---------------------------------------------------------------------------
# 2SRI
# ---------------------------------------------------------------------------


def simulate_endogenous(n, seed, confounding=0.9, instrument_strength=0.8):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=n)
    w = rng.normal(size=n)
    x_e = 0.5 + instrument_strength * w + 0.8 * u + rng.normal(scale=0.5, size=n)
    y = 1.0 + 0.5 * x_e + confounding * u + rng.normal(scale=0.6, size=n)
    return pd.DataFrame({"y": y, "x_e": x_e, "w": w})


def tsri_spec(**kw):
    base = dict(
        endogenous={"x_e": ["w"]},
        formulas={"mu": "1 + x_e", "sigma": "1"},
        family="normal",
        response="y",
    )
    base.update(kw)
    return TsriSpec(**base)


def test_tsri_removes_endogeneity_bias():
    naive_est, tsri_est = [], []
    for seed in range(8):
        df = simulate_endogenous(5000, 300 + seed)
        naive = fit_formulas("normal", {"mu": "1 + x_e", "sigma": "1"}, df)
        naive_est.append(naive.coef["mu"][1])
        res = tsri_fit(df, tsri_spec())
        tsri_est.append(res.model.coef["mu"][1])
    naive_est, tsri_est = np.asarray(naive_est), np.asarray(tsri_est)
    assert abs(naive_est.mean() - 0.5) > 5 * naive_est.std(ddof=1)
    se = tsri_est.std(ddof=1)
    hits = np.sum(np.abs(tsri_est - 0.5) <= 3 * se)
    assert hits >= 0.8 * len(tsri_est)


def test_tsri_exogenous_residual_coefficient_near_zero():
    coefs = []
    for seed in range(8):
        df = simulate_endogenous(3000, 400 + seed, confounding=0.0)
        res = tsri_fit(df, tsri_spec())
        named = res.model.coefficients_named()["mu"]
        coefs.append(named["resid_x_e"])
    coefs = np.asarray(coefs)
    assert abs(coefs.mean()) <= 3 * coefs.std(ddof=1) / math.sqrt(len(coefs))


def test_tsri_weak_instrument_warns():
    rng = np.random.default_rng(12)
    n = 2000
    u = rng.normal(size=n)
    df = pd.DataFrame({
        "w": rng.normal(size=n),  # unrelated to x_e
        "x_e": 0.8 * u + rng.normal(scale=0.6, size=n),
    })
    df["y"] = 1.0 + 0.5 * df["x_e"] + 0.9 * u + rng.normal(scale=0.6, size=n)
    with pytest.warns(WeakInstrumentWarning):
        tsri_fit(df, tsri_spec())


def test_tsri_requires_instruments():
    with pytest.raises(EffectError):
        TsriSpec(endogenous={"x_e": []}, formulas={"mu": "1 + x_e"})


def test_tsri_nests_naive_fit():
    df = simulate_endogenous(1200, 13)
    res = tsri_fit(df, tsri_spec())
    # dropping the residual terms from the second stage reproduces the naive
    # fit exactly on the same frame
    naive_a = fit_formulas("normal", {"mu": "1 + x_e", "sigma": "1"}, res.data)
    naive_b = fit_formulas("normal", {"mu": "1 + x_e", "sigma": "1"}, df)
    np.testing.assert_array_equal(naive_a.coef["mu"], naive_b.coef["mu"])


def test_tsri_standardized_residuals_unit_variance():
    df = simulate_endogenous(1500, 14)
    res = tsri_fit(df, tsri_spec(standardize_residuals=True))
    assert float(np.std(res.residuals["x_e"])) == pytest.approx(1.0, abs=1e-10)


def test_tsri_spline_residual_terms():
    df = simulate_endogenous(1500, 15)
    res = tsri_fit(df, tsri_spec(residual_terms="spline"))
    labels = [b.term.label for b in res.model.design.blocks["mu"]]
    assert "s(resid_x_e)" in labels


# ---------------------------------------------------------------------------
# RDD
# ---------------------------------------------------------------------------


def simulate_sharp_rdd(n, seed, jump=2.0, sigma_jump=0.0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, n)
    above = (x >= 0).astype(float)
    mu = 1.0 + 0.5 * x + jump * above
    sigma = np.exp(-0.6 + sigma_jump * above)
    y = rng.normal(mu, sigma)
    return pd.DataFrame({"y": y, "x": x})


def test_srd_recovers_known_jump():
    ests = []
    for seed in range(10):
        df = simulate_sharp_rdd(2000, 500 + seed)
        res = srd_fit(df, RddSpec(forcing="x", cutoff=0.0), MEAN)
        ests.append(res.estimate.difference)
    ests = np.asarray(ests)
    assert abs(ests.mean() - 2.0) <= 3 * ests.std(ddof=1) / math.sqrt(len(ests))


def test_srd_null_design_centered_at_zero():
    ests = []
    for seed in range(10):
        df = simulate_sharp_rdd(2000, 600 + seed, jump=0.0)
        res = srd_fit(df, RddSpec(forcing="x", cutoff=0.0), MEAN)
        ests.append(res.estimate.difference)
    ests = np.asarray(ests)
    assert abs(ests.mean()) <= 3 * ests.std(ddof=1) / math.sqrt(len(ests))


def test_srd_detects_variance_only_jump():
    var_ests, mean_ests = [], []
    for seed in range(10):
        df = simulate_sharp_rdd(3000, 700 + seed, jump=0.0, sigma_jump=0.8)
        spec = RddSpec(forcing="x", cutoff=0.0)
        var_ests.append(srd_fit(df, spec, VARIANCE).estimate.difference)
        mean_ests.append(srd_fit(df, spec, MEAN).estimate.difference)
    var_ests, mean_ests = np.asarray(var_ests), np.asarray(mean_ests)
    truth = math.exp(2 * 0.2) - math.exp(-1.2)
    assert abs(var_ests.mean() - truth) <= 3 * var_ests.std(ddof=1) / math.sqrt(10)
    assert abs(mean_ests.mean()) <= 3 * mean_ests.std(ddof=1) / math.sqrt(10)


def test_srd_bandwidth_restricts_window():
    df = simulate_sharp_rdd(4000, 17)
    res = srd_fit(df, RddSpec(forcing="x", cutoff=0.0, bandwidth=0.3), MEAN)
    assert res.n_left + res.n_right == int(np.sum(np.abs(df["x"]) <= 0.3))


def test_srd_rejects_one_sided_data():
    df = simulate_sharp_rdd(500, 18)
    df = df[df["x"] > 0]
    with pytest.raises(EffectError):
        srd_fit(df, RddSpec(forcing="x", cutoff=0.0), MEAN)


def test_srd_side_failure_names_side():
    df = simulate_sharp_rdd(400, 19)
    thin = pd.concat([df[df["x"] < 0].head(2), df[df["x"] >= 0]])
    with pytest.raises(EffectError, match="left"):
        srd_fit(thin, RddSpec(forcing="x", cutoff=0.0), MEAN)


def simulate_fuzzy_rdd(n, seed, effect=2.0, p_low=0.2, p_high=0.8):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, n)
    above = x >= 0
    p = np.where(above, p_high, p_low)
    T = (rng.random(n) < p).astype(float)
    y = 1.0 + 0.4 * x + effect * T + rng.normal(scale=0.5, size=n)
    return pd.DataFrame({"y": y, "x": x, "T": T})


def test_frd_sharp_as_fuzzy_equals_sharp():
    df = simulate_sharp_rdd(1500, 20)
    df["T"] = (df["x"] >= 0).astype(float)
    spec = RddSpec(forcing="x", cutoff=0.0, fuzzy=True, treatment="T")
    fuzzy = frd_fit(df, spec, MEAN)
    sharp = srd_fit(df, spec, MEAN)
    assert fuzzy.estimate.denominator == pytest.approx(1.0, abs=1e-9)
    assert fuzzy.estimate.difference == pytest.approx(sharp.estimate.difference, rel=1e-9)


def test_frd_recovers_ratio_of_jumps():
    ests = []
    for seed in range(10):
        df = simulate_fuzzy_rdd(4000, 800 + seed)
        spec = RddSpec(forcing="x", cutoff=0.0, fuzzy=True, treatment="T")
        res = frd_fit(df, spec, MEAN)
        ests.append(res.estimate.difference)
        assert res.compliance is not None
    ests = np.asarray(ests)
    assert abs(ests.mean() - 2.0) <= 3 * ests.std(ddof=1) / math.sqrt(len(ests))


def test_frd_no_identification_without_compliance_jump():
    df = simulate_fuzzy_rdd(2000, 21, p_low=0.5, p_high=0.5)
    # the estimated jump is pure noise here; a threshold above that noise
    # level must refuse identification
    spec = RddSpec(forcing="x", cutoff=0.0, fuzzy=True, treatment="T",
                   min_compliance=0.25)
    with pytest.raises(EffectError, match="not identified"):
        frd_fit(df, spec, MEAN)


# ---------------------------------------------------------------------------
# Panel wrapper
# ---------------------------------------------------------------------------


def simulate_confounded_panel(n_units, periods, seed, unit_effects=True):
    rng = np.random.default_rng(seed)
    alpha = rng.normal(scale=1.0, size=n_units) if unit_effects else np.zeros(n_units)
    rows = []
    for i in range(n_units):
        base_x = 0.8 * alpha[i]  # covariate level correlated with the unit effect
        for t in range(periods):
            x = base_x + rng.normal()
            y = 1.0 + 0.5 * x + alpha[i] + rng.normal(scale=0.5)
            rows.append((f"u{i:03d}", x, y))
    return pd.DataFrame(rows, columns=["unit", "x", "y"])


def fixed_effects_ols(df):
    units = sorted(df["unit"].unique())
    dummies = np.column_stack([(df["unit"] == u).to_numpy(float) for u in units])
    X = np.column_stack([df["x"].to_numpy(), dummies])
    beta = np.linalg.lstsq(X, df["y"].to_numpy(), rcond=None)[0]
    return beta[0]


def test_mundlak_matches_fixed_effects_on_balanced_panel():
    df = simulate_confounded_panel(60, 5, 22)
    model = panel_fit(df, "unit", {"mu": "1 + x", "sigma": "1"}, "normal",
                      mundlak=["x"], response="y")
    within = model.coefficients_named()["mu"]["x"]
    assert within == pytest.approx(fixed_effects_ols(df), abs=1e-6)


def test_mundlak_recovers_truth_where_pooled_is_biased():
    within_est, pooled_est = [], []
    for seed in range(8):
        df = simulate_confounded_panel(80, 4, 900 + seed)
        model = panel_fit(df, "unit", {"mu": "1 + x", "sigma": "1"}, "normal",
                          mundlak=["x"], response="y")
        within_est.append(model.coefficients_named()["mu"]["x"])
        pooled = fit_formulas("normal", {"mu": "1 + x", "sigma": "1"}, df)
        pooled_est.append(pooled.coef["mu"][1])
    within_est, pooled_est = np.asarray(within_est), np.asarray(pooled_est)
    assert abs(within_est.mean() - 0.5) <= 3 * within_est.std(ddof=1) / math.sqrt(8)
    assert abs(pooled_est.mean() - 0.5) > 5 * pooled_est.std(ddof=1)


def test_mundlak_coefficients_vanish_without_unit_effects():
    deltas = []
    for seed in range(8):
        df = simulate_confounded_panel(80, 4, 950 + seed, unit_effects=False)
        model = panel_fit(df, "unit", {"mu": "1 + x", "sigma": "1"}, "normal",
                          mundlak=["x"], response="y")
        deltas.append(model.coefficients_named()["mu"]["x_bar"])
    deltas = np.asarray(deltas)
    assert abs(deltas.mean()) <= 3 * deltas.std(ddof=1) / math.sqrt(8)


def test_panel_single_period_rejected():
    df = pd.DataFrame({"unit": ["a", "b", "c"], "x": [1.0, 2.0, 3.0],
                       "y": [0.1, 0.2, 0.3]})
    with pytest.raises(DesignError):
        panel_fit(df, "unit", {"mu": "1 + x", "sigma": "1"}, "normal",
                  mundlak=["x"], response="y")
