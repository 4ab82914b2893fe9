"""Censoring and treatment-switch weight models and weight attachment.

All weight models are fitted to the original person-period data, never
to expanded rows, so each observed indicator enters a fit exactly once
no matter how many trials reuse it.  Fitted probabilities become
per-period ratios which are then accumulated multiplicatively along
each trial's follow-up:

* censoring factor of row (m, k): product of censoring ratios over
  original periods m .. m+k-1 (the probability path of still being
  observed at m+k), and
* switch factor (per-protocol / as-treated only): product of treatment
  ratios over periods m+1 .. m+k.

Row (m, 0) always has weight 1.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .data_model import LongitudinalDataset, first_eligible_period
from .design import DesignInfo, TermSpec, parse_terms
from .errors import (
    DataWarning,
    IntegrityError,
    NumericsWarning,
    ParameterError,
    SchemaError,
    StratumEmptyError,
)
from .expansion import Estimand
from .glm import GlmFit, coefficient_table, fit_weighted_logistic, predict_probability

POOL_CHOICES = ("none", "both", "numerator")
RATIO_CLAMP = 1e-10


@dataclass(frozen=True)
class TruncationPolicy:
    """Weight truncation: asis, p99, explicit limits, or unweighted."""

    kind: str = "asis"
    lo: Optional[float] = None
    hi: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("asis", "p99", "limits", "unweighted"):
            raise ParameterError(f"unknown truncation policy '{self.kind}'")
        if self.kind == "limits":
            if self.lo is None or self.hi is None or not 0 <= self.lo < self.hi:
                raise ParameterError(
                    f"truncation limits need 0 <= lo < hi, got lo={self.lo} hi={self.hi}"
                )

    @classmethod
    def parse(cls, value) -> "TruncationPolicy":
        if isinstance(value, cls):
            return value
        if value is None:
            return cls("asis")
        if isinstance(value, str):
            return cls(value)
        if isinstance(value, dict):
            return cls(value.get("kind", "limits"), value.get("lo"), value.get("hi"))
        if isinstance(value, (tuple, list)) and len(value) == 2:
            return cls("limits", float(value[0]), float(value[1]))
        raise ParameterError(f"cannot parse truncation policy from {value!r}")

    def to_jsonable(self):
        if self.kind == "limits":
            return {"kind": "limits", "lo": self.lo, "hi": self.hi}
        return self.kind


def _terms(value, default="1") -> tuple[TermSpec, ...]:
    if value is None:
        return tuple(parse_terms(default))
    if isinstance(value, str):
        return tuple(parse_terms(value))
    return tuple(value)


@dataclass(frozen=True)
class WeightSpec:
    """Which weight models to fit and how.

    Numerator formulas being absent means the corresponding weights are
    unstabilised.  ``pool_cense=None`` resolves to ``numerator`` under
    ITT and ``none`` otherwise; an explicit ``none`` under ITT is
    rejected.
    """

    use_censor_weights: bool = False
    cense_d_cov: tuple[TermSpec, ...] = field(default_factory=lambda: _terms(None))
    cense_n_cov: Optional[tuple[TermSpec, ...]] = None
    switch_d_cov: tuple[TermSpec, ...] = field(default_factory=lambda: _terms(None))
    switch_n_cov: Optional[tuple[TermSpec, ...]] = None
    pool_cense: Optional[str] = None
    eligible_wts_0: Optional[str] = None
    eligible_wts_1: Optional[str] = None
    truncation: TruncationPolicy = TruncationPolicy("asis")

    def __post_init__(self):
        object.__setattr__(self, "cense_d_cov", _terms(self.cense_d_cov))
        object.__setattr__(self, "switch_d_cov", _terms(self.switch_d_cov))
        if self.cense_n_cov is not None:
            object.__setattr__(self, "cense_n_cov", _terms(self.cense_n_cov))
        if self.switch_n_cov is not None:
            object.__setattr__(self, "switch_n_cov", _terms(self.switch_n_cov))
        object.__setattr__(self, "truncation", TruncationPolicy.parse(self.truncation))
        if self.pool_cense is not None and self.pool_cense not in POOL_CHOICES:
            raise ParameterError(f"pool_cense must be one of {POOL_CHOICES}")

    @property
    def stabilized_censoring(self) -> bool:
        return self.cense_n_cov is not None

    @property
    def stabilized_switching(self) -> bool:
        return self.switch_n_cov is not None

    def resolve_pool_cense(self, estimand: Estimand) -> str:
        estimand = Estimand.parse(estimand)
        if self.pool_cense is None:
            return "numerator" if estimand is Estimand.ITT else "none"
        if estimand is Estimand.ITT and self.pool_cense == "none":
            raise ParameterError("estimand ITT requires pool_cense 'both' or 'numerator'")
        return self.pool_cense


@dataclass
class StratumFit:
    """One fitted weight model plus the rows it was fitted on."""

    label: str
    fit: GlmFit
    design: DesignInfo
    row_index: np.ndarray  # positions into the original frame


@dataclass
class CensorModels:
    denominator: dict[str, StratumFit]
    numerator: Optional[dict[str, StratumFit]]
    pooled_numerator: bool
    pooled_denominator: bool


@dataclass
class SwitchModels:
    denominator: dict[str, StratumFit]
    numerator: Optional[dict[str, StratumFit]]

    def fitting_rows(self) -> np.ndarray:
        return np.sort(np.concatenate([s.row_index for s in self.denominator.values()]))


@dataclass
class WeightModelSet:
    spec: WeightSpec
    censor: Optional[CensorModels] = None
    switch: Optional[SwitchModels] = None

    def to_jsonable(self) -> dict:
        def dump(group: Optional[dict[str, StratumFit]]):
            if group is None:
                return None
            out = []
            for label, sf in group.items():
                table = coefficient_table(sf.fit, sf.fit.model_covariance)
                out.append(
                    {
                        "stratum": label,
                        "formula": [t.label() for t in sf.design.terms],
                        "coefficients": table.to_dict(orient="records"),
                        "converged": bool(sf.fit.converged),
                        "n_obs": int(sf.fit.n_obs),
                    }
                )
            return out

        return {
            "censoring": {
                "denominator": dump(self.censor.denominator) if self.censor else None,
                "numerator": dump(self.censor.numerator) if self.censor else None,
            },
            "switching": {
                "denominator": dump(self.switch.denominator) if self.switch else None,
                "numerator": dump(self.switch.numerator) if self.switch else None,
            },
        }


def _fit_rows_mask(ds: LongitudinalDataset) -> np.ndarray:
    """Rows at or after the individual's first eligible period."""
    frame = ds.frame
    first = first_eligible_period(ds)
    first_for_row = frame["id"].map(first)
    return (~first_for_row.isna()) & (frame["period"] >= first_for_row)


def _prev_within_id(frame: pd.DataFrame, column: str) -> tuple[np.ndarray, np.ndarray]:
    """(has_prev, prev_value) for each record, within id in sorted order."""
    ids = frame["id"].to_numpy()
    vals = frame[column].to_numpy()
    n = len(frame)
    has_prev = np.zeros(n, dtype=bool)
    prev = np.zeros(n, dtype=vals.dtype)
    if n > 1:
        has_prev[1:] = ids[1:] == ids[:-1]
        prev[1:] = vals[:-1]
    return has_prev, prev


def _fit_stratum(
    label: str,
    frame: pd.DataFrame,
    rows: np.ndarray,
    response: np.ndarray,
    terms: tuple[TermSpec, ...],
    categorical: tuple[str, ...] = (),
) -> StratumFit:
    if rows.size == 0:
        raise StratumEmptyError(f"weight model stratum '{label}' has no fitting rows")
    sub = frame.iloc[rows]
    info = DesignInfo.fit(terms, sub, categorical=categorical)
    X, names = info.transform(sub)
    fit = fit_weighted_logistic(X, response[rows], column_names=names)
    return StratumFit(label=label, fit=fit, design=info, row_index=rows)


def fit_censoring_models(
    ds: LongitudinalDataset, spec: WeightSpec, estimand, categorical: tuple[str, ...] = ()
) -> CensorModels:
    """Fit the uncensored-indicator models on the original data.

    Fitting rows are person-periods at/after first eligibility with no
    event in the same period (the censoring process is modelled among
    event-free rows).  Stratification is by the treatment received at
    the same period; ``pool_cense`` decides which side is pooled.
    """
    estimand = Estimand.parse(estimand)
    if ds.column_map.censored is None:
        raise SchemaError("censoring weights requested but no censored column is mapped")
    pool = spec.resolve_pool_cense(estimand)
    frame = ds.frame
    mask = _fit_rows_mask(ds).to_numpy() & (frame["outcome"].to_numpy() == 0)
    response = (1 - frame["censored"].to_numpy()).astype(float)
    treatment = frame["treatment"].to_numpy()

    def strata_rows(pooled: bool) -> dict[str, np.ndarray]:
        if pooled:
            return {"pool": np.flatnonzero(mask)}
        return {
            "0": np.flatnonzero(mask & (treatment == 0)),
            "1": np.flatnonzero(mask & (treatment == 1)),
        }

    pooled_den = pool == "both"
    den = {
        f"d{label}" if not pooled_den else "pool_d": _fit_stratum(
            f"cense_d{label}" if not pooled_den else "cense_pool_d",
            frame, rows, response, spec.cense_d_cov, categorical,
        )
        for label, rows in strata_rows(pooled_den).items()
    }
    num = None
    pooled_num = pool in ("both", "numerator")
    if spec.stabilized_censoring:
        _warn_time_varying_numerator(ds, spec.cense_n_cov, "cense_n_cov")
        num = {
            f"n{label}" if not pooled_num else "pool_n": _fit_stratum(
                f"cense_n{label}" if not pooled_num else "cense_pool_n",
                frame, rows, response, spec.cense_n_cov, categorical,
            )
            for label, rows in strata_rows(pooled_num).items()
        }
    return CensorModels(
        denominator=den, numerator=num, pooled_numerator=pooled_num, pooled_denominator=pooled_den
    )


def fit_switch_models(
    ds: LongitudinalDataset, spec: WeightSpec, categorical: tuple[str, ...] = ()
) -> SwitchModels:
    """Fit the treatment models, one per previous-treatment stratum.

    Fitting rows are person-periods with a preceding record, at/after
    first eligibility.  ``time_on_regime`` enters the design lagged by
    one record (its value when the treatment decision is made); the
    same-period value would encode the response.  Rows flagged by
    ``eligible_wts_<a>`` = 0 are excluded from stratum a.
    """
    frame = ds.frame
    if "time_on_regime" not in frame.columns:
        from .expansion import derive_time_on_regime

        ds = derive_time_on_regime(ds)
        frame = ds.frame
    mask = _fit_rows_mask(ds).to_numpy()
    has_prev, prev_a = _prev_within_id(frame, "treatment")
    _, prev_tor = _prev_within_id(frame, "time_on_regime")
    mask &= has_prev
    response = frame["treatment"].to_numpy().astype(float)

    design_frame = frame.copy()
    design_frame["time_on_regime"] = prev_tor

    def stratum_rows(a: int) -> np.ndarray:
        rows = mask & (prev_a == a)
        flag_col = spec.eligible_wts_0 if a == 0 else spec.eligible_wts_1
        if flag_col is not None:
            if flag_col not in frame.columns:
                raise SchemaError(f"eligible_wts column '{flag_col}' not found in dataset")
            rows &= frame[flag_col].to_numpy() != 0
        return np.flatnonzero(rows)

    den = {
        f"d{a}": _fit_stratum(
            f"switch_d{a}", design_frame, stratum_rows(a), response, spec.switch_d_cov, categorical
        )
        for a in (0, 1)
    }
    num = None
    if spec.stabilized_switching:
        _warn_time_varying_numerator(ds, spec.switch_n_cov, "switch_n_cov")
        num = {
            f"n{a}": _fit_stratum(
                f"switch_n{a}", design_frame, stratum_rows(a), response, spec.switch_n_cov,
                categorical,
            )
            for a in (0, 1)
        }
    return SwitchModels(denominator=den, numerator=num)


def _warn_time_varying_numerator(ds: LongitudinalDataset, terms, argname: str) -> None:
    varying = []
    for term in terms:
        for var in term.variables():
            if var == "time_on_regime" or var not in ds.frame.columns:
                continue
            per_id = ds.frame.groupby("id")[var].nunique()
            if (per_id > 1).any():
                varying.append(var)
    if varying:
        warnings.warn(
            f"{argname} uses time-varying covariate(s) {sorted(set(varying))}; stabilisation "
            "is only valid if these are adjusted for in the outcome model",
            DataWarning,
            stacklevel=3,
        )


def fit_weight_models(
    ds: LongitudinalDataset, spec: WeightSpec, estimand, categorical: tuple[str, ...] = ()
) -> WeightModelSet:
    """Fit whichever weight models the estimand and spec require."""
    estimand = Estimand.parse(estimand)
    censor = (
        fit_censoring_models(ds, spec, estimand, categorical) if spec.use_censor_weights else None
    )
    switch = (
        fit_switch_models(ds, spec, categorical)
        if estimand in (Estimand.PP, Estimand.AS_TREATED)
        else None
    )
    return WeightModelSet(spec=spec, censor=censor, switch=switch)


def _predict_group(
    group: dict[str, StratumFit], frame: pd.DataFrame, out: np.ndarray
) -> np.ndarray:
    """Fill out[rows] with each stratum model's P(response=1) on its own rows."""
    for sf in group.values():
        sub = frame.iloc[sf.row_index]
        X, _ = sf.design.transform(sub)
        out[sf.row_index] = predict_probability(sf.fit, sf.fit.select_columns(X))
    return out


def _clamped(p: np.ndarray, what: str, warn: bool) -> np.ndarray:
    clipped = np.clip(p, RATIO_CLAMP, 1.0 - RATIO_CLAMP)
    n_clamped = int(np.sum(clipped != p))
    if n_clamped and warn:
        warnings.warn(
            f"{n_clamped} {what} probabilit(ies) hit the clamp boundary", NumericsWarning,
            stacklevel=3,
        )
    return clipped


def compute_period_ratios(
    ds: LongitudinalDataset, models: WeightModelSet, spec: Optional[WeightSpec] = None
) -> pd.DataFrame:
    """Per original record: censoring ratio ``r_cense`` and switch ratio ``r_switch``.

    Records outside a model's scope keep ratio 1 (they never enter a
    trial's weight product).  Unstabilised weights use numerator 1.
    """
    frame = ds.frame
    n = len(frame)
    out = pd.DataFrame(
        {
            "id": frame["id"].to_numpy(),
            "period": frame["period"].to_numpy(),
            "r_cense": np.ones(n),
            "r_switch": np.ones(n),
        }
    )

    if models.censor is not None:
        p_den = _predict_group(models.censor.denominator, frame, np.ones(n))
        p_den = _clamped(p_den, "censoring denominator", warn=True)
        covered = np.zeros(n, dtype=bool)
        for sf in models.censor.denominator.values():
            covered[sf.row_index] = True
        if models.censor.numerator is not None:
            p_num = _predict_group(models.censor.numerator, frame, np.ones(n))
            p_num = _clamped(p_num, "censoring numerator", warn=False)
        else:
            p_num = np.ones(n)
        ratio = np.where(covered, p_num / p_den, 1.0)
        out["r_cense"] = ratio

    if models.switch is not None:
        p_den = _predict_group(models.switch.denominator, frame, np.full(n, 0.5))
        covered = np.zeros(n, dtype=bool)
        for sf in models.switch.denominator.values():
            covered[sf.row_index] = True
        p_den = _clamped(p_den, "switch denominator", warn=True)
        treated = frame["treatment"].to_numpy() == 1
        if models.switch.numerator is not None:
            p_num = _predict_group(models.switch.numerator, frame, np.full(n, 0.5))
            p_num = _clamped(p_num, "switch numerator", warn=False)
            ratio = np.where(treated, p_num / p_den, (1.0 - p_num) / (1.0 - p_den))
        else:
            ratio = np.where(treated, 1.0 / p_den, 1.0 / (1.0 - p_den))
        out["r_switch"] = np.where(covered, ratio, 1.0)

    return out


def attach_weights(
    expanded: pd.DataFrame,
    ratios: pd.DataFrame,
    estimand,
    use_censor_weights: bool = True,
) -> pd.DataFrame:
    """Fill the ``weight`` column of expanded rows from per-period ratios.

    weight(m, k) = prod of censoring ratios over periods m..m+k-1 times,
    under PP/As-Treated, prod of switch ratios over periods m+1..m+k.
    weight(m, 0) is exactly 1.
    """
    estimand = Estimand.parse(estimand)
    out = expanded.copy()
    if len(out) == 0:
        return out
    use_switch = estimand in (Estimand.PP, Estimand.AS_TREATED)

    tab = ratios.sort_values(["id", "period"], kind="mergesort").reset_index(drop=True)
    log_c = np.log(tab["r_cense"].to_numpy())
    log_s = np.log(tab["r_switch"].to_numpy())
    ids = tab["id"].to_numpy()
    cum_c = pd.Series(log_c).groupby(ids).cumsum().to_numpy()
    cum_s = pd.Series(log_s).groupby(ids).cumsum().to_numpy()
    lookup = pd.DataFrame(
        {
            "id": tab["id"],
            "period": tab["period"],
            "c_excl": cum_c - log_c,  # prefix sum excluding the record itself
            "s_incl": cum_s,
        }
    )

    src_key = out[["id"]].copy()
    src_key["period"] = out["trial_period"] + out["followup_time"]
    start_key = out[["id", "trial_period"]].rename(columns={"trial_period": "period"})

    src = src_key.merge(lookup, on=["id", "period"], how="left")
    start = start_key.merge(lookup, on=["id", "period"], how="left")
    for merged, what in ((src, "row"), (start, "trial baseline")):
        if merged["c_excl"].isna().any():
            bad = merged[merged["c_excl"].isna()].iloc[0]
            raise IntegrityError(
                f"no ratio available for {what} period {int(bad['period'])} of id {int(bad['id'])}"
            )

    log_w = np.zeros(len(out))
    if use_censor_weights:
        log_w += src["c_excl"].to_numpy() - start["c_excl"].to_numpy()
    if use_switch:
        log_w += src["s_incl"].to_numpy() - start["s_incl"].to_numpy()
    out["weight"] = np.exp(log_w)
    return out


def truncate_weights(expanded: pd.DataFrame, policy) -> pd.DataFrame:
    """Apply a truncation policy to the ``weight`` column."""
    policy = TruncationPolicy.parse(policy)
    out = expanded.copy()
    if policy.kind == "asis" or len(out) == 0:
        return out
    w = out["weight"].to_numpy(dtype=float)
    if policy.kind == "unweighted":
        out["weight"] = 1.0
    elif policy.kind == "p99":
        lo, hi = np.percentile(w, [1.0, 99.0])
        out["weight"] = np.clip(w, lo, hi)
    else:
        out["weight"] = np.clip(w, policy.lo, policy.hi)
    return out


def mean_stabilized_switch_weight(
    ds: LongitudinalDataset, models: WeightModelSet, ratios: Optional[pd.DataFrame] = None
) -> float:
    """Mean of cumulative switch-ratio products over the switch fitting rows.

    A necessary condition for a correctly specified denominator model is
    that this mean is close to one.
    """
    if models.switch is None:
        raise ParameterError("no switch models were fitted")
    if ratios is None:
        ratios = compute_period_ratios(ds, models)
    rows = models.switch.fitting_rows()
    sub = ratios.iloc[rows]
    prods = sub.groupby("id", sort=False)["r_switch"].cumprod()
    return float(prods.mean())
