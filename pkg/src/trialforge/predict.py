"""Marginal cumulative incidence / survival under assigned treatment vs not.

Point estimates average per-row conditional cumulative incidence curves
over a user-supplied target population (baseline covariates plus a
``trial_period`` value per row).  Confidence intervals are percentile
intervals over coefficient draws from MVN(beta, robust covariance),
re-running the whole marginal computation for every draw.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .errors import NumericsWarning, ParameterError, SchemaError
from .expansion import Estimand
from .glm import expit
from .msm import MsmFit

PCTL = (2.5, 97.5)


@dataclass
class MarginalPrediction:
    """Per-visit marginal estimates for both arms plus their difference.

    ``difference`` is P(event | treated) - P(event | untreated), which
    for ``kind='survival'`` equals survival(untreated) - survival(treated).
    """

    times: np.ndarray
    arm0: np.ndarray
    arm1: np.ndarray
    difference: np.ndarray
    arm0_lo: Optional[np.ndarray] = None
    arm0_hi: Optional[np.ndarray] = None
    arm1_lo: Optional[np.ndarray] = None
    arm1_hi: Optional[np.ndarray] = None
    diff_lo: Optional[np.ndarray] = None
    diff_hi: Optional[np.ndarray] = None
    kind: str = "cum_inc"
    samples: int = 0
    seed: Optional[int] = None

    @property
    def has_conf_int(self) -> bool:
        return self.diff_lo is not None

    def to_frame(self) -> pd.DataFrame:
        prefix = "cum_inc" if self.kind == "cum_inc" else "survival"
        data = {
            "followup_time": self.times,
            f"{prefix}_0": self.arm0,
            f"{prefix}_1": self.arm1,
            f"{prefix}_diff": self.difference,
        }
        if self.has_conf_int:
            data["diff_2.5%"] = self.diff_lo
            data["diff_97.5%"] = self.diff_hi
            data[f"{prefix}_0_2.5%"] = self.arm0_lo
            data[f"{prefix}_0_97.5%"] = self.arm0_hi
            data[f"{prefix}_1_2.5%"] = self.arm1_lo
            data[f"{prefix}_1_97.5%"] = self.arm1_hi
        return pd.DataFrame(data)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


def _hazard_design(fit: MsmFit, newdata: pd.DataFrame, assigned: int, max_k: int) -> np.ndarray:
    """Design matrix stacked over followup times 0..max_k (time-major)."""
    needed = set()
    for term in fit.design.terms:
        needed.update(term.variables())
    programmatic = {"followup_time", "assigned_treatment", "dose", "treatment"}
    missing = sorted(v for v in needed - programmatic if v not in newdata.columns)
    if missing:
        raise SchemaError(f"newdata is missing variable(s) {missing}")

    frames = []
    for k in range(max_k + 1):
        block = newdata.copy()
        block["followup_time"] = k
        if "assigned_treatment" in needed:
            block["assigned_treatment"] = assigned
        if "treatment" in needed:
            block["treatment"] = assigned
        if "dose" in needed:
            block["dose"] = (k + 1) * assigned  # sustained regime, baseline included
        frames.append(block)
    stacked = pd.concat(frames, ignore_index=True)
    X, _ = fit.design.transform(stacked)
    return fit.glm.select_columns(X)


def _cum_inc_curves(hazards: np.ndarray) -> np.ndarray:
    """CI(k) = CI(k-1) + h(k) * S(k-1) along axis 0 (followup time)."""
    surv_prev = np.ones_like(hazards[0])
    out = np.empty_like(hazards)
    acc = np.zeros_like(hazards[0])
    for k in range(hazards.shape[0]):
        acc = acc + hazards[k] * surv_prev
        out[k] = acc
        surv_prev = surv_prev * (1.0 - hazards[k])
    return out


def conditional_cum_inc(
    fit: MsmFit,
    row: pd.DataFrame | pd.Series | dict,
    assigned: int,
    times: Sequence[int],
    beta: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Conditional cumulative incidence curve for a single covariate row."""
    if isinstance(row, dict):
        row = pd.DataFrame([row])
    elif isinstance(row, pd.Series):
        row = row.to_frame().T
    if len(row) != 1:
        raise ParameterError("conditional_cum_inc expects exactly one row")
    times = np.asarray(list(times), dtype=int)
    curve = _marginal_curve_matrix(fit, row, assigned, int(times.max()), beta)
    return curve[times, 0]


def _marginal_curve_matrix(
    fit: MsmFit,
    newdata: pd.DataFrame,
    assigned: int,
    max_k: int,
    beta: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Per-row cumulative incidence curves, shape (max_k+1, n_rows)."""
    X = _hazard_design(fit, newdata, assigned, max_k)
    b = fit.glm.coefficients if beta is None else np.asarray(beta, dtype=float)
    hazards = expit(X @ b).reshape(max_k + 1, len(newdata))
    return _cum_inc_curves(hazards)


def marginal_curves(
    fit: MsmFit,
    newdata: pd.DataFrame,
    assigned: int,
    times: Sequence[int],
    beta: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Marginal cumulative incidence at the requested times (mean over rows)."""
    times = np.asarray(list(times), dtype=int)
    curves = _marginal_curve_matrix(fit, newdata, assigned, int(times.max()), beta)
    return curves.mean(axis=1)[times]


def sample_coefficients(fit: MsmFit, samples: int, seed: int) -> np.ndarray:
    """Draw coefficient vectors from MVN(beta, robust covariance).

    Cholesky is attempted first; if the matrix is numerically indefinite
    it is repaired by clamping negative eigenvalues to zero (with a
    warning).  Deterministic for a given seed.
    """
    if samples < 1:
        raise ParameterError(f"samples must be >= 1, got {samples}")
    beta = fit.glm.coefficients
    sigma = np.asarray(fit.robust.matrix, dtype=float)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((samples, len(beta)))
    try:
        factor = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh((sigma + sigma.T) / 2.0)
        if (vals < -1e-8 * max(1.0, float(np.max(np.abs(vals))))).any():
            warnings.warn(
                "robust covariance has materially negative eigenvalues; clamped to zero",
                NumericsWarning,
                stacklevel=2,
            )
        factor = vecs * np.sqrt(np.clip(vals, 0.0, None))
    return beta + z @ factor.T


def marginal_effect(
    fit: MsmFit,
    newdata: pd.DataFrame,
    predict_times: Sequence[int],
    samples: int = 100,
    conf_int: bool = True,
    kind: str = "cum_inc",
    seed: Optional[int] = None,
) -> MarginalPrediction:
    """Marginal effect curves with simulation-based percentile intervals.

    Only intention-to-treat and per-protocol fits are supported; the
    as-treated estimand has no pre-specified regime to predict under.
    """
    if fit.estimand is Estimand.AS_TREATED:
        raise ParameterError("marginal effects are not available for as-treated fits")
    if kind not in ("cum_inc", "survival"):
        raise ParameterError(f"type must be 'cum_inc' or 'survival', got '{kind}'")
    if len(newdata) == 0:
        raise ParameterError("newdata must contain at least one row")
    times = np.asarray(sorted(int(t) for t in predict_times), dtype=int)
    if times.size == 0 or times.min() < 0:
        raise ParameterError("predict_times must be non-negative visit numbers")
    if conf_int:
        if samples < 2:
            raise ParameterError("conf_int requires samples >= 2")
        if seed is None:
            raise ParameterError("conf_int requires an explicit seed (part of the run record)")

    max_k = int(times.max())
    X1 = _hazard_design(fit, newdata, 1, max_k)
    X0 = _hazard_design(fit, newdata, 0, max_k)
    n = len(newdata)

    def curves(X, b):
        hazards = expit(X @ b).reshape(max_k + 1, n, -1)
        return _cum_inc_curves(hazards).mean(axis=1)  # (max_k+1, n_draws)

    beta = fit.glm.coefficients
    point1 = curves(X1, beta[:, None])[:, 0]
    point0 = curves(X0, beta[:, None])[:, 0]

    pred = MarginalPrediction(
        times=times,
        arm0=point0[times],
        arm1=point1[times],
        difference=(point1 - point0)[times],
        kind="cum_inc",
        samples=samples if conf_int else 0,
        seed=seed,
    )

    if conf_int:
        draws = sample_coefficients(fit, samples, seed)  # (S, p)
        c1 = curves(X1, draws.T)
        c0 = curves(X0, draws.T)
        diff = c1 - c0
        lo1, hi1 = np.percentile(c1, PCTL, axis=1)
        lo0, hi0 = np.percentile(c0, PCTL, axis=1)
        lod, hid = np.percentile(diff, PCTL, axis=1)
        pred.arm0_lo, pred.arm0_hi = lo0[times], hi0[times]
        pred.arm1_lo, pred.arm1_hi = lo1[times], hi1[times]
        pred.diff_lo, pred.diff_hi = lod[times], hid[times]

    if kind == "survival":
        pred = _to_survival(pred)
    return pred


def _to_survival(p: MarginalPrediction) -> MarginalPrediction:
    """survival = 1 - cum_inc per arm; the difference column is unchanged
    because survival(0) - survival(1) equals the cumulative-incidence
    difference."""
    out = MarginalPrediction(
        times=p.times,
        arm0=1.0 - p.arm0,
        arm1=1.0 - p.arm1,
        difference=p.difference,
        kind="survival",
        samples=p.samples,
        seed=p.seed,
    )
    if p.has_conf_int:
        out.arm0_lo, out.arm0_hi = 1.0 - p.arm0_hi, 1.0 - p.arm0_lo
        out.arm1_lo, out.arm1_hi = 1.0 - p.arm1_hi, 1.0 - p.arm1_lo
        out.diff_lo, out.diff_hi = p.diff_lo, p.diff_hi
    return out


def trial_baselines(expanded: pd.DataFrame, trial_period: int) -> pd.DataFrame:
    """Baseline (followup_time 0) rows of one trial, as a prediction population."""
    rows = expanded[
        (expanded["trial_period"] == trial_period) & (expanded["followup_time"] == 0)
    ].copy()
    drop = [c for c in ("followup_time", "outcome", "weight", "sample_weight") if c in rows.columns]
    return rows.drop(columns=drop).reset_index(drop=True)
