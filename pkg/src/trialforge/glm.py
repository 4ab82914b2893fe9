"""Weighted logistic regression by IRLS, with cluster-robust covariance.

This is the single solver behind every model in the package: censoring
and switching weight models and the pooled outcome model.  The sandwich
covariance treats the fitted weights as fixed and clusters score
contributions by individual, which accounts for the same person
appearing in several emulated trials.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import scipy.linalg
from scipy.stats import norm

from .errors import NonConvergenceWarning, ParameterError, SchemaError, SingularDesignError

PROB_CLAMP = 1e-10  # probabilities inside IRLS working weights / deviance logs
RANK_TOL = 1e-10
Z975 = 1.959964  # two-sided 95% normal quantile used in coefficient tables


def expit(eta: np.ndarray) -> np.ndarray:
    out = np.empty_like(eta, dtype=float)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    e = np.exp(eta[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class GlmFit:
    """Fitted weighted logistic regression.

    ``coefficients`` aligns with ``column_names``; columns dropped as
    aliased during rank detection are listed in ``dropped_columns`` and
    have no coefficient.
    """

    coefficients: np.ndarray
    model_covariance: np.ndarray
    deviance: float
    converged: bool
    iterations: int
    column_names: list[str]
    dropped_columns: list[str] = field(default_factory=list)
    kept_indices: list[int] = field(default_factory=list)
    n_obs: int = 0

    def select_columns(self, X: np.ndarray) -> np.ndarray:
        """Subset a full design matrix to the columns the fit retained."""
        X = np.asarray(X, dtype=float)
        if self.kept_indices and X.shape[1] != len(self.coefficients):
            return X[:, self.kept_indices]
        return X

    def linear_predictor(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.coefficients


@dataclass
class SandwichCovariance:
    matrix: np.ndarray
    cluster_count: int


def _deviance(y: np.ndarray, p: np.ndarray, w: np.ndarray) -> float:
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-2.0 * np.sum(w * (y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def _detect_aliased(Xw: np.ndarray) -> list[int]:
    """QR rank detection in column order: a column whose residual after
    projecting on the preceding columns is below tolerance is aliased,
    so later columns are the ones dropped."""
    n, p = Xw.shape
    if p == 0:
        return []
    r = scipy.linalg.qr(Xw, mode="r")[0]
    diag = np.zeros(p)
    k = min(n, p)
    diag[:k] = np.abs(np.diag(r)[:k])
    col_norms = np.sqrt(np.sum(Xw**2, axis=0))
    return [j for j in range(p) if diag[j] <= RANK_TOL * col_norms[j]]


def fit_weighted_logistic(
    X: np.ndarray,
    y: np.ndarray,
    w: Optional[np.ndarray] = None,
    tol: float = 1e-8,
    max_iter: int = 25,
    column_names: Optional[Sequence[str]] = None,
    drop_aliased: bool = True,
) -> GlmFit:
    """Maximise the w-weighted Bernoulli log-likelihood by IRLS.

    Convergence: relative deviance change < ``tol`` or score inf-norm
    < 1e-10.  An iteration that would increase the deviance is
    step-halved (up to 10 times); if the deviance still will not fall
    the fit stops and is flagged non-converged.  Aliased (collinear)
    columns are dropped with a warning when ``drop_aliased`` is true,
    otherwise a :class:`SingularDesignError` names them.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    n, p = X.shape
    w = np.ones(n) if w is None else np.asarray(w, dtype=float).ravel()
    if len(y) != n or len(w) != n:
        raise ParameterError(f"shape mismatch: X has {n} rows, y {len(y)}, w {len(w)}")
    if np.any(w < 0):
        raise ParameterError("weights must be non-negative")
    if not np.any(w > 0):
        raise ParameterError("at least one weight must be positive")
    names = list(column_names) if column_names is not None else [f"x{j}" for j in range(p)]
    if len(names) != p:
        raise ParameterError("column_names length must match design columns")

    active = w > 0
    aliased = _detect_aliased(X[active] * np.sqrt(w[active, None]))
    dropped = [names[j] for j in aliased]
    keep = [j for j in range(p) if j not in aliased]
    if aliased:
        if not drop_aliased:
            raise SingularDesignError(f"design is rank deficient; aliased columns: {dropped}")
        warnings.warn(
            f"dropping aliased design column(s): {dropped}", NonConvergenceWarning, stacklevel=2
        )
        X = X[:, keep]
        names = [names[j] for j in keep]
        p = len(keep)
    if p == 0:
        raise SingularDesignError("no usable design columns remain")

    beta = np.zeros(p)
    eta = X @ beta
    prob = expit(eta)
    dev = _deviance(y, prob, w)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        pc = np.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
        wls = w * pc * (1.0 - pc)
        score = X.T @ (w * (y - prob))
        try:
            delta = np.linalg.solve(X.T @ (X * wls[:, None]), score)
        except np.linalg.LinAlgError as exc:
            raise SingularDesignError(f"IRLS normal equations singular at iteration {it}") from exc

        step = 1.0
        new_dev = None
        for _ in range(11):  # full step plus up to 10 halvings
            cand = beta + step * delta
            cand_prob = expit(X @ cand)
            cand_dev = _deviance(y, cand_prob, w)
            if cand_dev <= dev + 1e-12:
                new_dev = cand_dev
                beta, prob = cand, cand_prob
                break
            step *= 0.5
        if new_dev is None:
            break  # deviance cannot be decreased; stop non-converged

        rel = abs(dev - new_dev) / (abs(dev) + 0.1)
        dev = new_dev
        score_norm = float(np.max(np.abs(X.T @ (w * (y - prob))))) if p else 0.0
        if rel < tol or score_norm < 1e-10:
            converged = True
            break

    if not converged:
        warnings.warn(
            f"IRLS did not converge in {it} iteration(s)",
            NonConvergenceWarning,
            stacklevel=2,
        )
    boundary = active & ((prob < 1e-8) | (prob > 1.0 - 1e-8))
    if boundary.any():
        warnings.warn(
            f"fitted probabilities numerically 0 or 1 occurred on {int(boundary.sum())} "
            "row(s); possible quasi-separation",
            NonConvergenceWarning,
            stacklevel=2,
        )

    pc = np.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    info = X.T @ (X * (w * pc * (1.0 - pc))[:, None])
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.full((p, p), np.nan)
    cov = (cov + cov.T) / 2.0
    return GlmFit(
        coefficients=beta,
        model_covariance=cov,
        deviance=dev,
        converged=converged,
        iterations=it,
        column_names=names,
        dropped_columns=dropped,
        kept_indices=keep,
        n_obs=int(np.sum(active)),
    )


def predict_probability(
    fit: GlmFit, X: np.ndarray, column_names: Optional[Sequence[str]] = None
) -> np.ndarray:
    """Logistic of the linear predictor; validates column names when given."""
    X = np.asarray(X, dtype=float)
    if column_names is not None and list(column_names) != fit.column_names:
        raise SchemaError(
            f"design columns {list(column_names)} do not match fitted columns {fit.column_names}"
        )
    if X.shape[1] != len(fit.coefficients):
        raise SchemaError(
            f"design has {X.shape[1]} columns, fit expects {len(fit.coefficients)}"
        )
    return expit(X @ fit.coefficients)


def score_rows(fit: GlmFit, X: np.ndarray, y: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Per-row weighted score contributions w * (y - p) * x."""
    X = np.asarray(X, dtype=float)
    p = expit(X @ fit.coefficients)
    return X * (np.asarray(w, float) * (np.asarray(y, float) - p))[:, None]


def cluster_sandwich_covariance(
    fit: GlmFit,
    X: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    cluster_ids: np.ndarray,
) -> SandwichCovariance:
    """Bread * meat * bread with per-cluster score sums, weights held fixed."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    w = np.asarray(w, dtype=float).ravel()
    cluster_ids = np.asarray(cluster_ids).ravel()
    if len(cluster_ids) != X.shape[0]:
        raise ParameterError("cluster_ids must have one entry per design row")

    prob = expit(X @ fit.coefficients)
    info = X.T @ (X * (w * prob * (1.0 - prob))[:, None])
    codes = np.unique(cluster_ids, return_inverse=True)[1]
    n_clusters = int(codes.max()) + 1 if len(codes) else 0
    scores = X * (w * (y - prob))[:, None]
    U = np.zeros((n_clusters, X.shape[1]))
    np.add.at(U, codes, scores)
    meat = U.T @ U
    try:
        bread = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise SingularDesignError("sandwich bread (information matrix) is singular") from exc
    cov = bread @ meat @ bread
    cov = (cov + cov.T) / 2.0
    return SandwichCovariance(matrix=cov, cluster_count=n_clusters)


def coefficient_table(fit: GlmFit, covariance: np.ndarray) -> pd.DataFrame:
    """Coefficient summary: name, estimate, robust_se, 2.5%, 97.5%, z, p."""
    se = np.sqrt(np.clip(np.diag(covariance), 0.0, None))
    est = fit.coefficients
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, est / se, np.inf * np.sign(est))
    pval = 2.0 * norm.sf(np.abs(z))
    return pd.DataFrame(
        {
            "name": fit.column_names,
            "estimate": est,
            "robust_se": se,
            "2.5%": est - Z975 * se,
            "97.5%": est + Z975 * se,
            "z": z,
            "p": pval,
        }
    )
