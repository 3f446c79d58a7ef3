"""Fitter correctness: closed-form anchors, recovery, GAIC, smoothing search."""

import numpy as np
import pandas as pd
import pytest

from distreg.design import assemble_design, build_formula_set
from distreg.families import get_family
from distreg.fit import (
    FitControl,
    FitError,
    FittedModel,
    SingularDesignError,
    fit,
    gaic,
    select_smoothing,
)


def make_design(formulas, df, params, categorical=None):
    fs = build_formula_set(formulas, params, categorical)
    return assemble_design(fs, df, categorical=categorical or set())


@pytest.fixture
def gaussian_data():
    rng = np.random.default_rng(100)
    n = 400
    T = rng.integers(0, 2, n).astype(float)
    x = rng.normal(size=n)
    y = 1.0 + 0.8 * T + 0.5 * x + rng.normal(scale=0.7, size=n)
    return pd.DataFrame({"y": y, "T": T, "x": x})


def test_control_validation():
    with pytest.raises(ValueError):
        FitControl(tol=0.0)
    with pytest.raises(ValueError):
        FitControl(max_cycles=0)


def test_gaussian_fit_matches_ols(gaussian_data):
    df = gaussian_data
    design = make_design({"mu": "1 + T + x", "sigma": "1"}, df, ("mu", "sigma"))
    model = fit(get_family("normal"), design, df["y"])
    assert model.converged

    # oracle: closed-form OLS and the ML variance estimate
    X = np.column_stack([np.ones(len(df)), df["T"], df["x"]])
    beta = np.linalg.lstsq(X, df["y"].to_numpy(), rcond=None)[0]
    np.testing.assert_allclose(model.coef["mu"], beta, atol=1e-8)
    resid = df["y"].to_numpy() - X @ beta
    sigma_ml = np.sqrt(np.mean(resid**2))
    assert float(model.fitted[1][0]) == pytest.approx(sigma_ml, rel=1e-6)


def test_poisson_intercept_only_is_sample_mean():
    rng = np.random.default_rng(5)
    y = rng.poisson(3.2, size=300).astype(float)
    df = pd.DataFrame({"y": y})
    design = make_design({"mu": "1"}, df, ("mu",))
    model = fit(get_family("poisson"), design, y)
    assert float(model.fitted[0][0]) == pytest.approx(float(np.mean(y)), rel=1e-8)


def test_lognormal_location_scale_recovery():
    # known DGP: mu = 0.5 + 0.3 T, log sigma = -0.5 + 0.2 T
    seeds = range(6)
    est = []
    for s in seeds:
        rng = np.random.default_rng(1000 + s)
        n = 5000
        T = rng.integers(0, 2, n).astype(float)
        mu = 0.5 + 0.3 * T
        sigma = np.exp(-0.5 + 0.2 * T)
        y = np.exp(rng.normal(mu, sigma))
        df = pd.DataFrame({"y": y, "T": T})
        design = make_design({"mu": "1 + T", "sigma": "1 + T"}, df, ("mu", "sigma"))
        model = fit(get_family("lognormal"), design, y)
        assert model.converged
        est.append(np.concatenate([model.coef["mu"], model.coef["sigma"]]))
    est = np.asarray(est)
    truth = np.array([0.5, 0.3, -0.5, 0.2])
    se = est.std(axis=0, ddof=1)
    assert np.all(np.abs(est.mean(axis=0) - truth) <= 3 * se / np.sqrt(len(est)) + 1e-3)


def test_deviance_trace_monotone(gaussian_data):
    df = gaussian_data
    design = make_design({"mu": "1 + T + x", "sigma": "1 + T"}, df, ("mu", "sigma"))
    model = fit(get_family("normal"), design, df["y"])
    diffs = np.diff(model.trace)
    assert np.all(diffs <= 1e-8)


def test_covariate_scaling_equivariance(gaussian_data):
    df = gaussian_data
    design = make_design({"mu": "1 + x", "sigma": "1"}, df, ("mu", "sigma"))
    m1 = fit(get_family("normal"), design, df["y"])

    df2 = df.assign(x=df["x"] * 10.0)
    design2 = make_design({"mu": "1 + x", "sigma": "1"}, df2, ("mu", "sigma"))
    m2 = fit(get_family("normal"), design2, df["y"])

    assert m2.coef["mu"][1] == pytest.approx(m1.coef["mu"][1] / 10.0, abs=1e-8)
    assert m2.loglik == pytest.approx(m1.loglik, abs=1e-8)
    np.testing.assert_allclose(m1.fitted[0], m2.fitted[0], atol=1e-8)


def test_nested_model_likelihood_never_decreases(gaussian_data):
    df = gaussian_data.assign(noise=np.random.default_rng(9).normal(size=len(gaussian_data)))
    small = fit(get_family("normal"),
                make_design({"mu": "1 + T", "sigma": "1"}, df, ("mu", "sigma")), df["y"])
    big = fit(get_family("normal"),
              make_design({"mu": "1 + T + noise", "sigma": "1"}, df, ("mu", "sigma")), df["y"])
    assert big.loglik >= small.loglik - 1e-8


def test_fit_rejects_underdetermined():
    df = pd.DataFrame({"y": [1.0, 2.0], "x": [0.1, 0.2], "z": [3.0, 1.0]})
    design = make_design({"mu": "1 + x + z", "sigma": "1"}, df, ("mu", "sigma"))
    with pytest.raises(FitError):
        fit(get_family("normal"), design, df["y"])


def test_singular_block_is_reported():
    rng = np.random.default_rng(3)
    n = 50
    x = rng.normal(size=n)
    df = pd.DataFrame({"y": rng.normal(size=n), "x": x, "x2": x})  # perfectly collinear
    design = make_design({"mu": "1 + x + x2", "sigma": "1"}, df, ("mu", "sigma"))
    with pytest.raises(SingularDesignError, match="mu"):
        fit(get_family("normal"), design, df["y"])


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def test_predict_reproduces_training_fit(gaussian_data):
    df = gaussian_data
    design = make_design({"mu": "1 + T + x", "sigma": "1 + T"}, df, ("mu", "sigma"))
    model = fit(get_family("normal"), design, df["y"])
    pred = model.predict_parameters(df)
    np.testing.assert_allclose(pred["mu"], model.fitted[0], atol=1e-12)
    np.testing.assert_allclose(pred["sigma"], model.fitted[1], atol=1e-12)


def test_intercept_only_prediction_constant(gaussian_data):
    df = gaussian_data
    design = make_design({"mu": "1", "sigma": "1"}, df, ("mu", "sigma"))
    model = fit(get_family("normal"), design, df["y"])
    pred = model.predict_parameters(df.head(10))
    assert np.ptp(pred["mu"]) == 0.0


def test_treatment_toggle_shifts_eta_by_coefficient(gaussian_data):
    df = gaussian_data
    design = make_design({"mu": "1 + T + x", "sigma": "1"}, df, ("mu", "sigma"))
    model = fit(get_family("normal"), design, df["y"])
    p0 = model.predict_parameters({"T": [0.0], "x": [0.3]})
    p1 = model.predict_parameters({"T": [1.0], "x": [0.3]})
    # identity link: eta difference equals the treatment coefficient exactly
    assert float(p1["mu"][0] - p0["mu"][0]) == pytest.approx(model.coef["mu"][1], abs=1e-12)


def test_predict_rejects_missing_column(gaussian_data):
    df = gaussian_data
    design = make_design({"mu": "1 + x", "sigma": "1"}, df, ("mu", "sigma"))
    model = fit(get_family("normal"), design, df["y"])
    with pytest.raises(Exception, match="x"):
        model.predict_parameters({"T": [1.0]})


# ---------------------------------------------------------------------------
# GAIC and smoothing selection
# ---------------------------------------------------------------------------


def test_gaic_zero_penalty_is_deviance(gaussian_data):
    df = gaussian_data
    design = make_design({"mu": "1 + T", "sigma": "1"}, df, ("mu", "sigma"))
    model = fit(get_family("normal"), design, df["y"])
    assert gaic(model, 0.0) == pytest.approx(-2.0 * model.loglik)


def test_unpenalized_edf_equals_coefficient_count(gaussian_data):
    df = gaussian_data
    design = make_design({"mu": "1 + T + x", "sigma": "1"}, df, ("mu", "sigma"))
    model = fit(get_family("normal"), design, df["y"])
    assert model.edf_total == pytest.approx(4.0, abs=1e-8)


def test_gaic_orders_nested_models_like_likelihood_ratio(gaussian_data):
    df = gaussian_data
    full = fit(get_family("normal"),
               make_design({"mu": "1 + T + x", "sigma": "1"}, df, ("mu", "sigma")),
               df["y"])
    reduced = fit(get_family("normal"),
                  make_design({"mu": "1", "sigma": "1"}, df, ("mu", "sigma")), df["y"])
    # oracle: the LR statistic dwarfs the edf difference, so GAIC must prefer full
    lr = 2.0 * (full.loglik - reduced.loglik)
    assert lr > 2.0 * (full.edf_total - reduced.edf_total)
    assert gaic(full, 2.0) < gaic(reduced, 2.0)


def test_smoothing_grid_of_one(gaussian_data):
    df = gaussian_data
    design = make_design({"mu": "1 + s(x, k=8)", "sigma": "1"}, df, ("mu", "sigma"))
    lambdas, model = select_smoothing(get_family("normal"), design, df["y"], [3.7])
    assert list(lambdas.values()) == [3.7]
    assert model.converged


def test_smoothing_empty_grid_rejected(gaussian_data):
    df = gaussian_data
    design = make_design({"mu": "1 + s(x, k=8)", "sigma": "1"}, df, ("mu", "sigma"))
    with pytest.raises(FitError):
        select_smoothing(get_family("normal"), design, df["y"], [])


def test_smoothing_linear_dgp_selects_max_lambda():
    rng = np.random.default_rng(21)
    n = 400
    x = rng.uniform(-2, 2, n)
    y = 1.0 + 0.9 * x + rng.normal(scale=0.5, size=n)
    df = pd.DataFrame({"y": y, "x": x})
    design = make_design({"mu": "1 + s(x, k=10)", "sigma": "1"}, df, ("mu", "sigma"))
    grid = [0.1, 1.0, 10.0, 100.0, 1000.0]
    lambdas, _ = select_smoothing(get_family("normal"), design, df["y"], grid)
    assert list(lambdas.values()) == [1000.0]


def test_smoothing_sine_dgp_beats_linear_fit():
    rng = np.random.default_rng(22)
    n = 500
    x = rng.uniform(0, 2 * np.pi, n)
    f = np.sin(x)
    y = f + rng.normal(scale=0.3, size=n)
    df = pd.DataFrame({"y": y, "x": x})

    design = make_design({"mu": "1 + s(x, k=12)", "sigma": "1"}, df, ("mu", "sigma"))
    grid = [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1e4]
    lambdas, model = select_smoothing(get_family("normal"), design, df["y"], grid)
    assert list(lambdas.values())[0] < 1e4

    linear = fit(get_family("normal"),
                 make_design({"mu": "1 + x", "sigma": "1"}, df, ("mu", "sigma")), df["y"])
    rmse_spline = np.sqrt(np.mean((model.fitted[0] - f) ** 2))
    rmse_linear = np.sqrt(np.mean((linear.fitted[0] - f) ** 2))
    assert rmse_spline < rmse_linear


def test_random_effect_shrinkage_limits():
    from distreg.design import Design, DesignBlock, TermSpec, build_random_effect_block

    rng = np.random.default_rng(30)
    n_per, groups = 20, 6
    n = n_per * groups
    g = np.repeat([f"g{i}" for i in range(groups)], n_per)
    effects = rng.normal(scale=1.0, size=groups)
    y = 2.0 + np.repeat(effects, n_per) + rng.normal(scale=0.5, size=n)
    df = pd.DataFrame({"y": y, "g": g})

    design = make_design({"mu": "1 + re(g)", "sigma": "1"}, df, ("mu", "sigma"),
                         categorical={"g"})
    for block in design.blocks["mu"]:
        if block.term.kind == "random_effect":
            block.lam = 1e9
    huge = fit(get_family("normal"), design, y)
    assert np.max(np.abs(huge.coef["mu"][1:])) < 1e-4  # lambda -> inf kills effects

    # lambda = 0 turns the penalty off: plain group dummies, i.e. group means
    re_block = build_random_effect_block(df["g"], variable="g")
    re_block.lam = 0.0
    sigma_block = DesignBlock(TermSpec("intercept"), np.ones((n, 1)), ["intercept"])
    bare = Design(blocks={"mu": [re_block], "sigma": [sigma_block]},
                  n_obs=n, fingerprint="manual")
    free = fit(get_family("normal"), bare, y)
    observed_means = df.groupby("g")["y"].mean().to_numpy()
    np.testing.assert_allclose(free.coef["mu"], observed_means, atol=1e-8)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def test_model_json_round_trip(gaussian_data):
    df = gaussian_data
    design = make_design({"mu": "1 + T + s(x, k=8)", "sigma": "1"}, df, ("mu", "sigma"))
    model = fit(get_family("normal"), design, df["y"])
    doc = model.to_json()
    restored = FittedModel.from_json(doc)
    new = df.head(7)
    np.testing.assert_allclose(
        restored.predict_parameters(new)["mu"],
        model.predict_parameters(new)["mu"],
        atol=1e-12,
    )
    assert restored.to_json() == doc


def test_smoothing_requires_grid_mode(gaussian_data):
    df = gaussian_data
    design = make_design({"mu": "1 + s(x, k=8)", "sigma": "1"}, df, ("mu", "sigma"))
    with pytest.raises(FitError, match="gaic-grid"):
        select_smoothing(get_family("normal"), design, df["y"], [1.0],
                         control=FitControl(lambda_mode="fixed"))
