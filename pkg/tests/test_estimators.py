import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rareps.estimators import (
    ESTIMATORS,
    EstimatorOptions,
    crude,
    fit_propensity,
    ipw_estimate,
    regression_adjust,
    run_all_ten,
    stabilized_weights,
    true_multivariate,
)
from rareps.glm import Separation, fit_logistic
from rareps.scenarios import build_scenario, generate
from rareps.tabular import BINARY, CONTINUOUS, CovariateSchema, Dataset, Variable, encode

from conftest import random_dataset, table_dataset


def test_crude_reported_table():
    res = crude(table_dataset(30, 289, 5, 139))
    assert res.odds_ratio == pytest.approx(2.886, abs=5e-4)
    assert res.ci95[0] == pytest.approx(1.10, abs=0.005)
    assert res.ci95[1] == pytest.approx(7.60, abs=0.005)
    assert res.std_err == pytest.approx(math.sqrt(1 / 30 + 1 / 289 + 1 / 5 + 1 / 139))


def test_crude_symmetric_and_zero_cells():
    assert crude(table_dataset(5, 5, 5, 5)).log_or == 0.0
    res = crude(table_dataset(3, 100, 0, 100))
    assert res.log_or == math.inf and res.separation is Separation.COMPLETE and res.ci95 is None
    assert crude(table_dataset(0, 100, 3, 100)).log_or == -math.inf
    with pytest.raises(ValueError):
        crude(table_dataset(3, 4, 0, 0))


def test_empty_confounder_set_gives_constant_scores(rng):
    ds = random_dataset(rng, 200)
    ps = fit_propensity(ds, [])
    assert np.all(ps.scores == ds.exposure.mean())
    assert ps.marginal_exposure_rate == ds.exposure.mean()
    assert np.allclose(stabilized_weights(ps), 1.0)


def test_scenario_one_propensity_signs():
    scenario = build_scenario("I")
    agree = 0
    for i in range(1000):
        ds = generate(scenario, np.random.default_rng([77, i]))
        fit = fit_propensity(ds, ["X1", "X2"]).fit
        agree += fit.coef("X1") < 0 and fit.coef("X2") > 0
    assert agree / 1000 >= 0.95


def test_balanced_covariate_gives_zero_slope():
    schema = CovariateSchema((Variable("b", BINARY),))
    ds = Dataset(schema, np.array([1, 0, 1, 0]), np.array([1, 0, 0, 1]), {"b": np.array([1, 1, 0, 0])})
    assert fit_propensity(ds, ["b"]).fit.coef("b") == pytest.approx(0.0, abs=1e-10)


def test_stabilized_weight_formula():
    ds = table_dataset(1, 1, 1, 1)
    ps = fit_propensity(ds, [])
    ps_half = type(ps)(None, np.array([0.25, 0.5, 0.5, 0.5]), (), 0.5, ds)
    assert stabilized_weights(ps_half)[0] == pytest.approx(2.0)
    # unexposed subject with P(A=0) = 1/3
    ps_third = type(ps)(None, np.array([0.5, 0.5, 0.5, 0.5]), (), 2 / 3, ds)
    assert stabilized_weights(ps_third)[2] == pytest.approx(2 / 3)


def test_ipw_unit_weights_equals_crude(rng):
    ds = random_dataset(rng, 300)
    ps = fit_propensity(ds, [])
    assert ipw_estimate(ds, ps).log_or == pytest.approx(crude(ds).log_or, abs=1e-14)


def test_ipw_hand_computed_toy():
    ds = table_dataset(1, 1, 1, 1)
    ps = fit_propensity(ds, [])
    res = ipw_estimate(ds, ps, weights=np.array([2.0, 2.0, 1.0, 3.0]))
    assert res.log_or == pytest.approx(math.log(3), abs=1e-12)
    assert res.log_or == pytest.approx(1.0986, abs=1e-4)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_ipw_closed_form_equals_weighted_glm(seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, 300)
    ps = fit_propensity(ds, ["x", "b"])
    res = ipw_estimate(ds, ps)
    if not math.isfinite(res.log_or):
        return
    fit = fit_logistic(encode(ds, []), ds.outcome, stabilized_weights(ps))
    assert fit.coef("(exposure)") == pytest.approx(res.log_or, abs=1e-8)
    assert res.weights_summary[0] <= res.weights_summary[2] <= res.weights_summary[1]


def test_weight_normalization_under_true_ps():
    ds = generate(build_scenario("I", {"n": 10_000}), np.random.default_rng(21))
    w = stabilized_weights(fit_propensity(ds, ["X1", "X2", "X3", "X5"]))
    for arm in (0, 1):
        assert abs(w[ds.exposure == arm].mean() - 1) < 0.05


def test_weight_truncation_caps_weights(rng):
    ds = random_dataset(rng, 300)
    ps = fit_propensity(ds, ["x", "b"])
    capped = ipw_estimate(ds, ps, weight_truncation=0.9)
    assert capped.weights_summary[1] == pytest.approx(np.quantile(stabilized_weights(ps), 0.9))


def test_regression_adjust_constant_ps_is_crude(rng):
    ds = random_dataset(rng, 300)
    res = regression_adjust(ds, fit_propensity(ds, []))
    assert res.log_or == pytest.approx(crude(ds).log_or, abs=1e-6)


def test_regression_adjust_independent_covariate_consistent_with_crude():
    rng = np.random.default_rng(8)
    n = 10_000
    x = rng.uniform(size=n)
    a = (rng.random(n) < 1 / (1 + np.exp(-(-0.5 + 2 * x)))).astype(int)
    y = (rng.random(n) < 1 / (1 + np.exp(-(-1 + 0.8 * a)))).astype(int)
    ds = Dataset(CovariateSchema((Variable("x", CONTINUOUS),)), a, y, {"x": x})
    ps = fit_propensity(ds, ["x"])
    for scale in ("probability", "logit"):
        assert abs(regression_adjust(ds, ps, scale=scale).log_or - crude(ds).log_or) < 0.05


def test_true_multivariate_empty_is_crude(rng):
    ds = random_dataset(rng, 300)
    assert true_multivariate(ds, []).log_or == pytest.approx(crude(ds).log_or, abs=1e-6)


def test_true_multivariate_targets_scenario_three_effect():
    ds = generate(build_scenario("III", {"n": 100_000}), np.random.default_rng(9))
    assert true_multivariate(ds, ["asthma", "mat_height"]).log_or == pytest.approx(1.03, abs=0.15)


def test_true_multivariate_scenario_one_unbiased():
    scenario = build_scenario("I")
    est = []
    for i in range(400):
        res = true_multivariate(generate(scenario, np.random.default_rng([5, i])), ["X1", "X2"])
        if math.isfinite(res.log_or):
            est.append(res.log_or)
    assert abs(np.mean(est) - 1.0) < 0.1


def test_run_all_ten_contract():
    scenario = build_scenario("I")
    ds = generate(scenario, np.random.default_rng(3))
    res = run_all_ten(ds, scenario.true_confounders, scenario.pool)
    assert [r.estimator_id for r in res] == list(ESTIMATORS) and len(set(ESTIMATORS)) == 10
    for r in res:
        assert (r.ci95 is not None) == (r.std_err is not None and math.isfinite(r.std_err)
                                       and math.isfinite(r.log_or) and r.separation is Separation.NONE)


def test_run_all_ten_zero_unexposed_events():
    schema = CovariateSchema((Variable("x", CONTINUOUS),))
    ds = table_dataset(10, 100, 0, 60, {"x": np.linspace(0, 1, 170)}, schema)
    res = run_all_ten(ds, ["x"], ["x"])
    assert all(r.log_or == math.inf for r in res)


def test_run_all_ten_oracle_equals_all_when_sets_match(rng):
    ds = random_dataset(rng, 400)
    pool = ["x", "b", "c", "d"]
    res = {r.estimator_id: r for r in run_all_ten(ds, pool, pool)}
    assert res["reg_oracle"].log_or == res["reg_all"].log_or
    assert res["ipw_oracle"].log_or == res["ipw_all"].log_or


def test_options_validation():
    with pytest.raises(ValueError):
        EstimatorOptions(pval_alpha=1.5)
    with pytest.raises(ValueError):
        EstimatorOptions(separation_policy="sometimes")
    with pytest.raises(ValueError):
        EstimatorOptions(ps_adjust_scale="odds")
