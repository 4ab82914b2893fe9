import numpy as np
import pytest

import trialforge as tf
from trialforge.errors import NonConvergenceWarning, ParameterError, SingularDesignError
from trialforge.glm import expit, score_rows

from conftest import brute_force_sandwich, newton_logistic_oracle, random_logistic_problem


def test_intercept_only_closed_form():
    X = np.ones((4, 1))
    y = np.array([1.0, 1.0, 1.0, 0.0])
    fit = tf.fit_weighted_logistic(X, y)
    assert fit.converged
    np.testing.assert_allclose(fit.coefficients[0], np.log(3.0), atol=1e-8)


def test_weighted_intercept_closed_form():
    X = np.ones((2, 1))
    y = np.array([1.0, 0.0])
    w = np.array([3.0, 1.0])
    fit = tf.fit_weighted_logistic(X, y, w)
    np.testing.assert_allclose(fit.coefficients[0], np.log(3.0), atol=1e-8)


def test_matches_newton_oracle_on_two_column_problem():
    rng = np.random.default_rng(42)
    X, y, w = random_logistic_problem(rng, 50, 2)
    fit = tf.fit_weighted_logistic(X, y, w)
    oracle = newton_logistic_oracle(X, y, w)
    np.testing.assert_allclose(fit.coefficients, oracle, atol=1e-6)


def test_score_is_zero_at_optimum():
    rng = np.random.default_rng(7)
    X, y, w = random_logistic_problem(rng, 120, 4)
    fit = tf.fit_weighted_logistic(X, y, w)
    score = score_rows(fit, X, y, w).sum(axis=0)
    assert np.max(np.abs(score)) < 1e-6


def test_score_matches_finite_differences():
    rng = np.random.default_rng(8)
    X, y, w = random_logistic_problem(rng, 80, 3)
    fit = tf.fit_weighted_logistic(X, y, w)

    def loglik(beta):
        p = expit(X @ beta)
        return float(np.sum(w * (y * np.log(p) + (1 - y) * np.log(1 - p))))

    h = 1e-3
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        numeric = (loglik(fit.coefficients + e) - loglik(fit.coefficients - e)) / (2 * h)
        analytic = score_rows(fit, X, y, w).sum(axis=0)[j]
        assert abs(numeric - analytic) <= 1e-4 * max(1.0, abs(numeric))


def test_deviance_non_increasing():
    rng = np.random.default_rng(9)
    X, y, w = random_logistic_problem(rng, 60, 3)
    devs = []
    for iters in range(1, 8):
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            devs.append(tf.fit_weighted_logistic(X, y, w, max_iter=iters).deviance)
    assert all(b <= a + 1e-9 for a, b in zip(devs, devs[1:]))


def test_separation_flagged_not_silent():
    # complete separation: the fit may stop with a near-zero score, but the
    # boundary fitted probabilities must be surfaced as a warning
    X = np.column_stack([np.ones(10), np.r_[np.zeros(5), np.ones(5)]])
    y = np.r_[np.zeros(5), np.ones(5)]
    with pytest.warns(NonConvergenceWarning, match="0 or 1|converge"):
        tf.fit_weighted_logistic(X, y)


def test_aliased_column_dropped_with_warning():
    rng = np.random.default_rng(10)
    x = rng.normal(size=40)
    X = np.column_stack([np.ones(40), x, 2.0 * x])
    y = (rng.random(40) < 0.5).astype(float)
    with pytest.warns(NonConvergenceWarning, match="aliased"):
        fit = tf.fit_weighted_logistic(X, y, column_names=["(Intercept)", "x", "x2"])
    assert fit.dropped_columns == ["x2"]
    assert fit.column_names == ["(Intercept)", "x"]
    assert len(fit.coefficients) == 2


def test_rank_deficiency_raises_when_drop_disabled():
    X = np.column_stack([np.ones(20), np.ones(20)])
    y = np.r_[np.zeros(10), np.ones(10)]
    with pytest.raises(SingularDesignError, match="aliased"):
        tf.fit_weighted_logistic(X, y, column_names=["a", "b"], drop_aliased=False)


def test_input_validation():
    with pytest.raises(ParameterError):
        tf.fit_weighted_logistic(np.ones((3, 1)), np.zeros(2))
    with pytest.raises(ParameterError):
        tf.fit_weighted_logistic(np.ones((3, 1)), np.zeros(3), np.array([-1.0, 1, 1]))
    with pytest.raises(ParameterError):
        tf.fit_weighted_logistic(np.ones((3, 1)), np.zeros(3), np.zeros(3))


def test_predict_probability_values():
    fit = tf.fit_weighted_logistic(np.ones((4, 1)), np.array([1.0, 1, 1, 0]))
    prob = tf.predict_probability(fit, np.ones((2, 1)))
    np.testing.assert_allclose(prob, [0.75, 0.75], atol=1e-8)

    zero = tf.GlmFit(
        coefficients=np.zeros(2), model_covariance=np.eye(2), deviance=0.0,
        converged=True, iterations=0, column_names=["a", "b"],
    )
    np.testing.assert_array_equal(
        tf.predict_probability(zero, np.random.default_rng(0).normal(size=(5, 2))),
        np.full(5, 0.5),
    )


def test_predict_probability_long_double_oracle():
    rng = np.random.default_rng(12)
    beta = rng.normal(size=3)
    X = rng.normal(size=(50, 3))
    fit = tf.GlmFit(
        coefficients=beta, model_covariance=np.eye(3), deviance=0.0,
        converged=True, iterations=0, column_names=list("abc"),
    )
    eta = X.astype(np.longdouble) @ beta.astype(np.longdouble)
    oracle = np.exp(eta) / (1.0 + np.exp(eta))
    np.testing.assert_allclose(tf.predict_probability(fit, X), oracle.astype(float), atol=1e-12)


def test_predict_probability_schema_check():
    fit = tf.fit_weighted_logistic(np.ones((4, 1)), np.array([1.0, 0, 1, 0]),
                                   column_names=["(Intercept)"])
    with pytest.raises(tf.errors.SchemaError):
        tf.predict_probability(fit, np.ones((2, 1)), column_names=["other"])


# ---------------------------------------------------------------------------
# Cluster-robust sandwich covariance


def test_sandwich_matches_brute_force_intercept_only():
    rng = np.random.default_rng(21)
    X = np.ones((30, 1))
    y = (rng.random(30) < 0.4).astype(float)
    w = np.ones(30)
    clusters = np.arange(30)
    fit = tf.fit_weighted_logistic(X, y, w)
    got = tf.cluster_sandwich_covariance(fit, X, y, w, clusters)
    expected = brute_force_sandwich(fit.coefficients, X, y, w, clusters)
    np.testing.assert_allclose(got.matrix, expected, atol=1e-10)
    assert got.cluster_count == 30


def test_sandwich_row_duplication_invariance():
    rng = np.random.default_rng(22)
    X, y, w = random_logistic_problem(rng, 40, 3)
    clusters = rng.integers(0, 8, size=40)
    fit = tf.fit_weighted_logistic(X, y, w)
    sw = tf.cluster_sandwich_covariance(fit, X, y, w, clusters)

    X2 = np.vstack([X, X])
    y2 = np.r_[y, y]
    w2 = np.r_[w, w] / 2.0
    c2 = np.r_[clusters, clusters]
    fit2 = tf.fit_weighted_logistic(X2, y2, w2)
    sw2 = tf.cluster_sandwich_covariance(fit2, X2, y2, w2, c2)
    np.testing.assert_allclose(fit.coefficients, fit2.coefficients, atol=1e-8)
    np.testing.assert_allclose(sw.matrix, sw2.matrix, atol=1e-8)


def test_sandwich_single_cluster_rank_one_psd():
    rng = np.random.default_rng(23)
    X, y, w = random_logistic_problem(rng, 25, 2)
    fit = tf.fit_weighted_logistic(X, y, w)
    sw = tf.cluster_sandwich_covariance(fit, X, y, w, np.zeros(25, dtype=int))
    assert sw.cluster_count == 1
    assert np.linalg.matrix_rank(sw.matrix, tol=1e-12) <= 1
    eigvals = np.linalg.eigvalsh(sw.matrix)
    assert eigvals.min() >= -1e-10


def test_coefficient_table_layout_and_normal_tail():
    fit = tf.GlmFit(
        coefficients=np.array([2.0]), model_covariance=np.array([[0.25]]),
        deviance=0.0, converged=True, iterations=1, column_names=["x"],
    )
    table = tf.coefficient_table(fit, np.array([[0.25]]))
    assert list(table.columns) == ["name", "estimate", "robust_se", "2.5%", "97.5%", "z", "p"]
    row = table.iloc[0]
    assert row["z"] == pytest.approx(4.0)
    assert row["p"] == pytest.approx(6.33e-5, rel=1e-2)
    np.testing.assert_allclose([row["2.5%"], row["97.5%"]], [2 - 1.959964 * 0.5, 2 + 1.959964 * 0.5])


def test_sandwich_approaches_model_covariance_when_iid():
    # unit weights, singleton clusters, well-specified model: the sandwich
    # and model-based covariances agree up to sampling noise
    rng = np.random.default_rng(99)
    n = 20_000
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    beta_true = np.array([-1.0, 0.7])
    y = (rng.random(n) < expit(X @ beta_true)).astype(float)
    w = np.ones(n)
    fit = tf.fit_weighted_logistic(X, y, w)
    sw = tf.cluster_sandwich_covariance(fit, X, y, w, np.arange(n))
    rel = np.abs(np.diag(sw.matrix) - np.diag(fit.model_covariance)) / np.diag(
        fit.model_covariance
    )
    assert rel.max() < 0.1
