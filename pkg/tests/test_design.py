import numpy as np
import pandas as pd
import pytest
from scipy.interpolate import BSpline
from scipy.linalg import null_space

import trialforge as tf
from trialforge.design import DesignInfo
from trialforge.errors import FormulaError, ParameterError, SchemaError, ValidationError


# ---------------------------------------------------------------------------
# Formula parsing


def test_parse_formula_terms_and_order():
    f = tf.parse_formula("y ~ 1 + X1 + pow(t,2) + ns(fup,3) + X3:X4")
    assert f.response == "y"
    kinds = [t.kind for t in f.terms]
    assert kinds == ["intercept", "linear", "power", "spline", "interaction"]


def test_parse_terms_implicit_intercept():
    terms = tf.parse_terms("X1 + X2")
    assert terms[0].kind == "intercept"
    assert [t.var for t in terms[1:]] == ["X1", "X2"]


@pytest.mark.parametrize("bad", ["X1 + 1", "pow(t,1)", "ns(x,0)", "a:b:c", "2x", "ns(x)"])
def test_parse_errors(bad):
    with pytest.raises(FormulaError):
        tf.parse_terms(bad)


# ---------------------------------------------------------------------------
# Design matrices


def test_design_row_from_example_data():
    rows = pd.DataFrame({"X3": [0.0], "X4": [0.96]})
    X, names = tf.build_design_matrix(tf.parse_terms("1 + X3 + X4"), rows)
    assert names == ["(Intercept)", "X3", "X4"]
    np.testing.assert_allclose(X[0], [1.0, 0.0, 0.96])


def test_intercept_only_design():
    rows = pd.DataFrame(index=range(5), data={"dummy": np.zeros(5)})
    X, names = tf.build_design_matrix(tf.parse_terms("1"), rows)
    assert X.shape == (5, 1)
    assert np.all(X == 1.0)


def test_power_term_evaluates():
    rows = pd.DataFrame({"t": [3.0]})
    X, _ = tf.build_design_matrix(tf.parse_terms("1 + t + pow(t,2)"), rows)
    np.testing.assert_allclose(X[0], [1.0, 3.0, 9.0])


def test_power_equals_square_of_linear():
    rng = np.random.default_rng(5)
    rows = pd.DataFrame({"x": rng.normal(size=50)})
    X, names = tf.build_design_matrix(tf.parse_terms("x + pow(x,2)"), rows)
    np.testing.assert_array_equal(X[:, 2], X[:, 1] ** 2)


def test_interaction_is_elementwise_product():
    rng = np.random.default_rng(6)
    rows = pd.DataFrame({"a": rng.normal(size=30), "b": rng.normal(size=30)})
    X, names = tf.build_design_matrix(tf.parse_terms("a + b + a:b"), rows)
    np.testing.assert_array_equal(X[:, 3], X[:, 1] * X[:, 2])
    assert names[3] == "a:b"


def test_unknown_variable_is_schema_error():
    with pytest.raises(SchemaError, match="nope"):
        tf.build_design_matrix(tf.parse_terms("1 + nope"), pd.DataFrame({"x": [1.0]}))


def test_non_finite_value_is_row_error():
    rows = pd.DataFrame({"x": [1.0, np.inf]})
    with pytest.raises(ValidationError, match="row 1"):
        tf.build_design_matrix(tf.parse_terms("1 + x"), rows)


def test_categorical_one_hot_reference_is_smallest():
    rows = pd.DataFrame({"g": ["b", "a", "c", "a"]})
    X, names = tf.build_design_matrix(tf.parse_terms("1 + g"), rows, categorical=("g",))
    assert names == ["(Intercept)", "g[b]", "g[c]"]  # 'a' is the reference level
    np.testing.assert_array_equal(X[:, 1], [1, 0, 0, 0])
    np.testing.assert_array_equal(X[:, 2], [0, 0, 1, 0])


def test_categorical_unseen_level_rejected():
    train = pd.DataFrame({"g": ["a", "b"]})
    info = DesignInfo.fit(tf.parse_terms("1 + g"), train, categorical=("g",))
    with pytest.raises(SchemaError, match="unseen"):
        info.transform(pd.DataFrame({"g": ["z"]}))


def test_design_info_round_trips_through_dict():
    rows = pd.DataFrame({"x": np.linspace(0, 9, 30), "g": ["a", "b", "c"] * 10})
    info = DesignInfo.fit(tf.parse_terms("1 + ns(x,3) + g"), rows, categorical=("g",))
    clone = DesignInfo.from_dict(info.to_dict())
    X1, n1 = info.transform(rows)
    X2, n2 = clone.transform(rows)
    assert n1 == n2
    np.testing.assert_array_equal(X1, X2)


# ---------------------------------------------------------------------------
# Natural cubic splines


def test_spline_knots_at_equally_spaced_quantiles():
    spec = tf.spline_spec_from_data(np.arange(10.0), df=3)
    assert spec.interior_knots == (3.0, 6.0)
    assert spec.boundary_knots == (0.0, 9.0)


def test_spline_df1_is_linear_rescaling():
    x = np.linspace(2.0, 7.0, 25)
    spec = tf.spline_spec_from_data(x, df=1)
    basis = tf.natural_spline_basis(x, spec)
    assert basis.shape == (25, 1)
    np.testing.assert_allclose(basis[:, 0], (x - 2.0) / 5.0, atol=1e-12)


def test_spline_linear_beyond_boundaries():
    x_train = np.arange(10.0)
    spec = tf.spline_spec_from_data(x_train, df=3)
    left = np.linspace(-6.0, -1.0, 11)
    right = np.linspace(10.0, 16.0, 13)
    for grid in (left, right):
        basis = tf.natural_spline_basis(grid, spec)
        second_diff = np.diff(basis, n=2, axis=0)
        assert np.max(np.abs(second_diff)) < 1e-8


def test_spline_train_reevaluate_consistency():
    rng = np.random.default_rng(11)
    x = rng.uniform(0, 9, size=200)
    spec = tf.spline_spec_from_data(x, df=4)
    b1 = tf.natural_spline_basis(x, spec)
    b2 = tf.natural_spline_basis(x.copy(), spec)
    np.testing.assert_array_equal(b1, b2)


def test_spline_errors():
    with pytest.raises(ParameterError):
        tf.spline_spec_from_data(np.arange(10.0), df=0)
    with pytest.raises(ParameterError):
        tf.spline_spec_from_data(np.full(5, 3.3), df=2)


def _bspline_natural_space(knots: np.ndarray):
    """Oracle basis of the natural cubic spline space on the given knots.

    Cubic B-splines on the clamped knot vector, constrained to zero
    second derivative at both boundary knots via an SVD null space.
    Returns a callable mapping x (inside the boundaries) to a matrix
    whose columns span the natural spline space.
    """
    a, b = knots[0], knots[-1]
    t = np.r_[[a] * 4, knots[1:-1], [b] * 4]
    n_basis = len(t) - 4
    coeffs = np.eye(n_basis)
    splines = [BSpline(t, c, 3) for c in coeffs]
    constraints = np.array(
        [[s.derivative(2)(a) for s in splines], [s.derivative(2)(b) for s in splines]]
    )
    H = null_space(constraints)  # n_basis x (len(knots))

    def evaluate(x):
        B = np.column_stack([s(x) for s in splines])
        return B @ H

    return evaluate


def test_spline_matches_independent_bspline_oracle():
    # Basis values are pinned by interpolation conditions at the knots and
    # verified at disjoint evaluation points against the B-spline oracle.
    x_train = np.arange(10.0)
    spec = tf.spline_spec_from_data(x_train, df=3)
    knots = spec.all_knots
    oracle = _bspline_natural_space(knots)

    ours_at_knots = tf.natural_spline_basis(knots, spec)
    oracle_at_knots = oracle(knots)
    theta = np.linalg.solve(oracle_at_knots.T @ oracle_at_knots,
                            oracle_at_knots.T @ ours_at_knots)

    x_check = np.linspace(0.0, 9.0, 301)
    ours = tf.natural_spline_basis(x_check, spec)
    reconstructed = oracle(x_check) @ theta
    np.testing.assert_allclose(reconstructed, ours, atol=1e-8)


def test_spline_c2_continuity_at_knots():
    # Second differences of a C2 function vary smoothly across each knot.
    spec = tf.SplineBasisSpec(df=3, interior_knots=(3.0, 6.0), boundary_knots=(0.0, 9.0))
    h = 1e-4
    for knot in (3.0, 6.0):
        grid = np.array([knot - h, knot, knot + h])
        basis = tf.natural_spline_basis(grid, spec)
        left_slope = (basis[1] - basis[0]) / h
        right_slope = (basis[2] - basis[1]) / h
        np.testing.assert_allclose(left_slope, right_slope, atol=1e-2)
