import numpy as np
import pandas as pd
import pytest

import trialforge as tf
from trialforge.design import DesignInfo, TermSpec
from trialforge.errors import NumericsWarning, ParameterError, SchemaError
from trialforge.glm import GlmFit, SandwichCovariance

from conftest import SNAPSHOT_COVS


def constant_hazard_fit(h: float, sigma: float = 0.0) -> tf.MsmFit:
    """Intercept-only fit with hazard h at every visit."""
    beta = np.array([-np.inf if h == 0 else np.log(h / (1 - h))])
    glm = GlmFit(
        coefficients=beta, model_covariance=np.array([[sigma**2]]), deviance=0.0,
        converged=True, iterations=1, column_names=["(Intercept)"],
    )
    design = DesignInfo(terms=[TermSpec(kind="intercept")])
    return tf.MsmFit(
        glm=glm,
        robust=SandwichCovariance(matrix=np.array([[sigma**2]]), cluster_count=1),
        design=design,
        spec=tf.MsmSpec(),
        estimand=tf.Estimand.ITT,
    )


@pytest.fixture(scope="module")
def fitted(sim_1000):
    rows = tf.expand(sim_1000, "ITT", tf.ExpansionOptions(outcome_covariates=SNAPSHOT_COVS))
    spec = tf.MsmSpec(outcome_covariates="X1 + X2 + X3 + X4 + age_s")
    fit = tf.fit_msm(rows, spec, estimand="ITT")
    return fit, tf.trial_baselines(rows, 0)


@pytest.mark.parametrize("h", [0.0, 0.1, 0.5])
def test_constant_hazard_closed_form(h):
    fit = constant_hazard_fit(h)
    row = pd.DataFrame({"trial_period": [0]})
    curve = tf.conditional_cum_inc(fit, row, assigned=1, times=range(10))
    expected = 1.0 - (1.0 - h) ** (np.arange(10) + 1)
    np.testing.assert_allclose(curve, expected, atol=1e-12)


def test_constant_hazard_value():
    curve = tf.conditional_cum_inc(constant_hazard_fit(0.1), {"trial_period": 0}, 1, range(10))
    assert curve[-1] == pytest.approx(0.6513, abs=5e-5)


def test_conditional_matches_step_oracle(fitted):
    fit, nd = fitted
    row = nd.iloc[[0]]
    times = list(range(10))
    got = tf.conditional_cum_inc(fit, row, assigned=1, times=times)

    # direct recurrence from per-visit hazards
    from trialforge.predict import _hazard_design

    X = _hazard_design(fit, row, 1, 9)
    h = 1.0 / (1.0 + np.exp(-(X @ fit.glm.coefficients)))
    surv, ci, expected = 1.0, 0.0, []
    for k in range(10):
        ci += h[k] * surv
        surv *= 1 - h[k]
        expected.append(ci)
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_marginal_of_single_row_equals_conditional(fitted):
    fit, nd = fitted
    row = nd.iloc[[3]]
    marginal = tf.marginal_curves(fit, row, 1, range(10))
    conditional = tf.conditional_cum_inc(fit, row, 1, range(10))
    np.testing.assert_allclose(marginal, conditional, atol=1e-14)


def test_marginal_is_mean_of_conditionals(fitted):
    fit, nd = fitted
    sub = nd.head(7)
    marginal = tf.marginal_curves(fit, sub, 0, range(5))
    singles = np.stack(
        [tf.conditional_cum_inc(fit, sub.iloc[[i]], 0, range(5)) for i in range(7)]
    )
    np.testing.assert_allclose(marginal, singles.mean(axis=0), atol=1e-12)


def test_survival_is_one_minus_cum_inc(fitted):
    fit, nd = fitted
    ci = tf.marginal_effect(fit, nd, range(10), samples=25, seed=5, kind="cum_inc")
    sv = tf.marginal_effect(fit, nd, range(10), samples=25, seed=5, kind="survival")
    np.testing.assert_array_equal(sv.arm1, 1.0 - ci.arm1)
    np.testing.assert_array_equal(sv.arm0, 1.0 - ci.arm0)
    np.testing.assert_array_equal(sv.difference, ci.difference)
    np.testing.assert_array_equal(sv.arm1_lo, 1.0 - ci.arm1_hi)
    np.testing.assert_array_equal(sv.diff_lo, ci.diff_lo)


def test_zero_treatment_coefficient_gives_zero_difference(fitted):
    fit, nd = fitted
    forced = tf.MsmFit(
        glm=GlmFit(
            coefficients=fit.glm.coefficients.copy(),
            model_covariance=fit.glm.model_covariance,
            deviance=0.0, converged=True, iterations=1,
            column_names=fit.glm.column_names,
            kept_indices=fit.glm.kept_indices,
        ),
        robust=fit.robust, design=fit.design, spec=fit.spec, estimand=fit.estimand,
    )
    forced.glm.coefficients[fit.glm.column_names.index("assigned_treatment")] = 0.0
    pred = tf.marginal_effect(forced, nd, range(10), samples=40, seed=11)
    np.testing.assert_allclose(pred.difference, 0.0, atol=1e-14)
    assert (pred.diff_lo <= 0).all() and (pred.diff_hi >= 0).all()


def test_monotone_curves_and_bounds(fitted):
    fit, nd = fitted
    pred = tf.marginal_effect(fit, nd, range(10), samples=30, seed=3)
    for arr in (pred.arm0, pred.arm1, pred.arm0_lo, pred.arm0_hi, pred.arm1_lo, pred.arm1_hi):
        assert (np.diff(arr) >= -1e-15).all()
    assert ((pred.arm0 >= 0) & (pred.arm0 <= 1)).all()
    assert (pred.diff_lo <= pred.difference + 1e-15).all()
    assert (pred.difference <= pred.diff_hi + 1e-15).all()


def test_monotonicity_holds_per_draw(fitted):
    fit, nd = fitted
    draws = tf.sample_coefficients(fit, 50, seed=21)
    for beta in draws:
        curve = tf.marginal_curves(fit, nd.head(20), 1, range(10), beta=beta)
        assert (np.diff(curve) >= -1e-15).all()


def test_sample_coefficients_deterministic(fitted):
    fit, _ = fitted
    a = tf.sample_coefficients(fit, 20, seed=77)
    b = tf.sample_coefficients(fit, 20, seed=77)
    np.testing.assert_array_equal(a, b)
    c = tf.sample_coefficients(fit, 20, seed=78)
    assert not np.array_equal(a, c)


def test_sample_coefficients_zero_covariance():
    fit = constant_hazard_fit(0.2, sigma=0.0)
    draws = tf.sample_coefficients(fit, 10, seed=1)
    np.testing.assert_array_equal(draws, np.full((10, 1), fit.glm.coefficients[0]))


def test_sample_coefficients_lln():
    fit = constant_hazard_fit(0.2, sigma=1.0)
    draws = tf.sample_coefficients(fit, 100_000, seed=123)
    centered = draws[:, 0] - fit.glm.coefficients[0]
    assert abs(centered.mean()) < 0.02
    assert abs(centered.var() - 1.0) < 0.05


def test_indefinite_covariance_repaired_with_warning():
    fit = constant_hazard_fit(0.2)
    fit.robust = SandwichCovariance(matrix=np.array([[-0.5]]), cluster_count=1)
    with pytest.warns(NumericsWarning):
        draws = tf.sample_coefficients(fit, 5, seed=2)
    np.testing.assert_array_equal(draws, np.full((5, 1), fit.glm.coefficients[0]))


def test_parameter_validation(fitted):
    fit, nd = fitted
    with pytest.raises(ParameterError, match="samples"):
        tf.marginal_effect(fit, nd, range(5), samples=1, conf_int=True, seed=1)
    with pytest.raises(ParameterError, match="seed"):
        tf.marginal_effect(fit, nd, range(5), samples=10, conf_int=True, seed=None)
    with pytest.raises(ParameterError, match="newdata"):
        tf.marginal_effect(fit, nd.head(0), range(5), samples=10, seed=1)
    with pytest.raises(ParameterError, match="as-treated"):
        bad = tf.MsmFit(glm=fit.glm, robust=fit.robust, design=fit.design,
                        spec=fit.spec, estimand=tf.Estimand.AS_TREATED)
        tf.marginal_effect(bad, nd, range(5), samples=10, seed=1)


def test_missing_newdata_variable_named(fitted):
    fit, nd = fitted
    with pytest.raises(SchemaError, match="X4"):
        tf.marginal_effect(fit, nd.drop(columns=["X4"]), range(5), samples=5, seed=1)


def test_dose_regime_in_prediction(sim_1000):
    rows = tf.expand(
        sim_1000, "PP",
        tf.ExpansionOptions(outcome_covariates=("X3", "X4"),
                            model_var=("assigned_treatment", "dose")),
    )
    spec = tf.MsmSpec(outcome_covariates="X3 + X4", model_var=("dose",))
    fit = tf.fit_msm(rows, spec, estimand="PP")
    nd = tf.trial_baselines(rows, 0)[["trial_period", "X3", "X4"]]
    pred = tf.marginal_effect(fit, nd, range(5), conf_int=False)
    assert (np.diff(pred.arm1) >= 0).all()
    assert pred.samples == 0


def test_no_conf_int_columns(fitted):
    fit, nd = fitted
    pred = tf.marginal_effect(fit, nd, range(4), conf_int=False)
    frame = pred.to_frame()
    assert list(frame.columns) == ["followup_time", "cum_inc_0", "cum_inc_1", "cum_inc_diff"]


def test_output_frame_layout(fitted):
    fit, nd = fitted
    frame = tf.marginal_effect(fit, nd, range(4), samples=10, seed=9).to_frame()
    assert list(frame.columns) == [
        "followup_time", "cum_inc_0", "cum_inc_1", "cum_inc_diff",
        "diff_2.5%", "diff_97.5%",
        "cum_inc_0_2.5%", "cum_inc_0_97.5%", "cum_inc_1_2.5%", "cum_inc_1_97.5%",
    ]
    assert frame["followup_time"].tolist() == [0, 1, 2, 3]


def test_percentile_bounds_stabilize_with_samples(fitted):
    fit, nd = fitted
    big = tf.marginal_effect(fit, nd, range(10), samples=2000, seed=31)
    bigger = tf.marginal_effect(fit, nd, range(10), samples=4000, seed=32)
    assert np.max(np.abs(big.diff_lo - bigger.diff_lo)) < 0.01
    assert np.max(np.abs(big.diff_hi - bigger.diff_hi)) < 0.01
