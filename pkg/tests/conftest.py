import io

import numpy as np
import pandas as pd
import pytest

import trialforge as tf

# Person-period records for three individuals from the example data set:
# one censored at the first visit, one censored after three visits on
# sustained treatment, one fully observed with two treatment switches.
GOLDEN_CSV = """ID,t,A,X1,X2,X3,X4,age,age_s,Y,C,eligible
1,0,1,0,-0.35,0,0.96,49,1.17,0,1,1
2,0,1,1,-1.15,1,1.70,30,-0.42,0,0,1
2,1,1,1,1.45,1,1.70,31,-0.33,0,0,0
2,2,1,0,1.27,1,1.70,32,-0.25,0,1,0
4,0,0,0,-1.01,0,-0.31,53,1.50,0,0,1
4,1,0,0,0.38,0,-0.31,54,1.58,0,0,1
4,2,1,1,-0.44,0,-0.31,55,1.67,0,0,1
4,3,1,1,0.20,0,-0.31,56,1.75,0,0,0
4,4,1,0,-0.45,0,-0.31,57,1.83,0,0,0
4,5,1,0,0.24,0,-0.31,58,1.92,0,0,0
4,6,1,1,0.20,0,-0.31,59,2.00,0,0,0
4,7,0,0,-0.19,0,-0.31,60,2.08,0,0,0
4,8,1,1,-0.50,0,-0.31,61,2.17,0,0,0
4,9,1,0,0.43,0,-0.31,62,2.25,0,0,0
"""

SNAPSHOT_COVS = ("X1", "X2", "X3", "X4", "age_s")


def golden_frame() -> pd.DataFrame:
    return pd.read_csv(io.StringIO(GOLDEN_CSV))


@pytest.fixture
def golden_dataset() -> tf.LongitudinalDataset:
    return tf.from_frame(golden_frame(), tf.simulated_column_map())


@pytest.fixture
def golden_csv_path(tmp_path):
    path = tmp_path / "golden.csv"
    path.write_text(GOLDEN_CSV)
    return path


@pytest.fixture
def expansion_options() -> tf.ExpansionOptions:
    return tf.ExpansionOptions(outcome_covariates=SNAPSHOT_COVS)


@pytest.fixture(scope="session")
def sim_1000() -> tf.LongitudinalDataset:
    """One n=1000 simulated dataset shared by the slower statistical tests."""
    return tf.simulate_dataset(tf.SimConfig(n=1000, seed=20230815))


def random_logistic_problem(rng, n, p, weighted=True):
    """A solvable random weighted logistic problem."""
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))]) if p > 1 else np.ones((n, 1))
    beta = rng.normal(scale=0.8, size=p)
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-X @ beta))).astype(float)
    w = rng.uniform(0.2, 3.0, size=n) if weighted else np.ones(n)
    return X, y, w


def newton_logistic_oracle(X, y, w, tol=1e-12, max_iter=200):
    """Independent Newton iteration with the analytic Hessian, run to 1e-12."""
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    w = np.asarray(w, float)
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        eta = X @ beta
        prob = 1.0 / (1.0 + np.exp(-eta))
        grad = X.T @ (w * (y - prob))
        hess = X.T @ (X * (w * prob * (1 - prob))[:, None])
        step = np.linalg.solve(hess, grad)
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            break
    return beta


def brute_force_sandwich(beta, X, y, w, clusters):
    """Direct per-cluster summation of the bread/meat sandwich formula."""
    X = np.asarray(X, float)
    prob = 1.0 / (1.0 + np.exp(-(X @ beta)))
    bread_inv = np.zeros((X.shape[1], X.shape[1]))
    for i in range(len(y)):
        xi = X[i]
        bread_inv += w[i] * prob[i] * (1 - prob[i]) * np.outer(xi, xi)
    meat = np.zeros_like(bread_inv)
    for c in np.unique(clusters):
        u = np.zeros(X.shape[1])
        for i in np.flatnonzero(clusters == c):
            u += w[i] * (y[i] - prob[i]) * X[i]
        meat += np.outer(u, u)
    bread = np.linalg.inv(bread_inv)
    return bread @ meat @ bread
