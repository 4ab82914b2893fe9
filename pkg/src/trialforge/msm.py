"""Pooled logistic outcome model over expanded rows.

The design is assembled in a fixed order (intercept, treatment
variables, trial terms, follow-up terms, baseline covariates), fitted
by weighted IRLS, and paired with a sandwich covariance clustered by
individual so that reuse of a person across trials is reflected in the
standard errors.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .design import DesignInfo, TermSpec, parse_terms
from .errors import EmptyDataError, ParameterError, SchemaError
from .expansion import Estimand
from .glm import (
    GlmFit,
    SandwichCovariance,
    cluster_sandwich_covariance,
    coefficient_table,
    fit_weighted_logistic,
)
from .predicates import evaluate_predicate
from .weights import TruncationPolicy, truncate_weights

TREATMENT_VARS = ("assigned_treatment", "dose", "treatment")


def _terms(value, default: str) -> tuple[TermSpec, ...]:
    if value is None:
        return tuple(parse_terms(default))
    if isinstance(value, str):
        return tuple(parse_terms(value))
    return tuple(value)


@dataclass(frozen=True)
class MsmSpec:
    """Outcome-model specification for the pooled logistic regression."""

    outcome_covariates: tuple[TermSpec, ...] = ()
    model_var: tuple[str, ...] = ("assigned_treatment",)
    followup_terms: tuple[TermSpec, ...] = None
    trial_terms: tuple[TermSpec, ...] = None
    first_followup: Optional[int] = None
    last_followup: Optional[int] = None
    where_case: Optional[str] = None
    analysis_weights: TruncationPolicy = TruncationPolicy("asis")
    use_sample_weights: bool = False

    def __post_init__(self):
        object.__setattr__(self, "outcome_covariates", _terms(self.outcome_covariates or (), "1"))
        object.__setattr__(
            self, "followup_terms",
            _terms(self.followup_terms, "followup_time + pow(followup_time,2)"),
        )
        object.__setattr__(
            self, "trial_terms", _terms(self.trial_terms, "trial_period + pow(trial_period,2)")
        )
        object.__setattr__(self, "model_var", tuple(self.model_var) or ("assigned_treatment",))
        object.__setattr__(self, "analysis_weights", TruncationPolicy.parse(self.analysis_weights))
        for v in self.model_var:
            if v not in TREATMENT_VARS:
                raise ParameterError(f"model_var entries must be among {TREATMENT_VARS}, got '{v}'")
        if (
            self.first_followup is not None
            and self.last_followup is not None
            and self.first_followup > self.last_followup
        ):
            raise ParameterError("first_followup must not exceed last_followup")

    def design_terms(self) -> list[TermSpec]:
        """Intercept, treatment variables, trial terms, follow-up terms, covariates."""
        terms: list[TermSpec] = [TermSpec(kind="intercept")]
        terms.extend(TermSpec(kind="linear", var=v) for v in self.model_var)
        for group in (self.trial_terms, self.followup_terms, self.outcome_covariates):
            terms.extend(t for t in group if t.kind != "intercept")
        return terms

    def to_dict(self) -> dict:
        return {
            "outcome_covariates": [t.to_dict() for t in self.outcome_covariates],
            "model_var": list(self.model_var),
            "followup_terms": [t.to_dict() for t in self.followup_terms],
            "trial_terms": [t.to_dict() for t in self.trial_terms],
            "first_followup": self.first_followup,
            "last_followup": self.last_followup,
            "where_case": self.where_case,
            "analysis_weights": self.analysis_weights.to_jsonable(),
            "use_sample_weights": self.use_sample_weights,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MsmSpec":
        def terms_of(key):
            value = d.get(key)
            if value is None:
                return None
            return tuple(TermSpec.from_dict(t) for t in value)

        return cls(
            outcome_covariates=terms_of("outcome_covariates") or (),
            model_var=tuple(d.get("model_var", ("assigned_treatment",))),
            followup_terms=terms_of("followup_terms"),
            trial_terms=terms_of("trial_terms"),
            first_followup=d.get("first_followup"),
            last_followup=d.get("last_followup"),
            where_case=d.get("where_case"),
            analysis_weights=TruncationPolicy.parse(d.get("analysis_weights")),
            use_sample_weights=bool(d.get("use_sample_weights", False)),
        )


@dataclass
class MsmFit:
    """Fitted marginal structural model with frozen design state."""

    glm: GlmFit
    robust: SandwichCovariance
    design: DesignInfo
    spec: MsmSpec
    estimand: Optional[Estimand] = None
    n_individuals: int = 0
    n_rows: int = 0
    categorical: tuple[str, ...] = ()

    def summary(self) -> pd.DataFrame:
        return coefficient_table(self.glm, self.robust.matrix)

    def to_json_dict(self) -> dict:
        return {
            "format": "trialforge-msm",
            "estimand": self.estimand.value if self.estimand else None,
            "spec": self.spec.to_dict(),
            "design": self.design.to_dict(),
            "categorical": list(self.categorical),
            "coefficient_table": self.summary().to_dict(orient="records"),
            "column_names": self.glm.column_names,
            "dropped_columns": self.glm.dropped_columns,
            "kept_indices": list(self.glm.kept_indices),
            "coefficients": self.glm.coefficients.tolist(),
            "model_covariance": self.glm.model_covariance.tolist(),
            "robust_matrix": self.robust.matrix.tolist(),
            "cluster_count": self.robust.cluster_count,
            "converged": bool(self.glm.converged),
            "iterations": self.glm.iterations,
            "deviance": self.glm.deviance,
            "n_individuals": self.n_individuals,
            "n_rows": self.n_rows,
        }

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)

    @classmethod
    def from_json_dict(cls, d: dict) -> "MsmFit":
        glm = GlmFit(
            coefficients=np.asarray(d["coefficients"], dtype=float),
            model_covariance=np.asarray(d["model_covariance"], dtype=float),
            deviance=float(d.get("deviance", np.nan)),
            converged=bool(d.get("converged", True)),
            iterations=int(d.get("iterations", 0)),
            column_names=list(d["column_names"]),
            dropped_columns=list(d.get("dropped_columns", [])),
            kept_indices=list(d.get("kept_indices", [])),
            n_obs=int(d.get("n_rows", 0)),
        )
        robust = SandwichCovariance(
            matrix=np.asarray(d["robust_matrix"], dtype=float),
            cluster_count=int(d.get("cluster_count", 0)),
        )
        estimand = Estimand.parse(d["estimand"]) if d.get("estimand") else None
        return cls(
            glm=glm,
            robust=robust,
            design=DesignInfo.from_dict(d["design"]),
            spec=MsmSpec.from_dict(d["spec"]),
            estimand=estimand,
            n_individuals=int(d.get("n_individuals", 0)),
            n_rows=int(d.get("n_rows", 0)),
            categorical=tuple(d.get("categorical", ())),
        )

    @classmethod
    def load_json(cls, path) -> "MsmFit":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def fit_msm(
    expanded: pd.DataFrame,
    spec: MsmSpec,
    estimand=None,
    categorical: Sequence[str] = (),
) -> MsmFit:
    """Fit the weighted pooled logistic model on expanded rows.

    Rows are filtered by the follow-up window and ``where_case``; the
    fitting weight is the analysis-policy-transformed weight times the
    case-control ``sample_weight`` when ``use_sample_weights`` is set.
    The sandwich covariance clusters score contributions by ``id``.
    """
    estimand = Estimand.parse(estimand) if estimand is not None else None
    if estimand is Estimand.AS_TREATED and tuple(spec.model_var) == ("assigned_treatment",):
        raise ParameterError(
            "as-treated analyses need a treatment-sequence summary (dose or treatment), "
            "not assigned_treatment alone"
        )

    df = expanded
    if spec.first_followup is not None:
        df = df[df["followup_time"] >= spec.first_followup]
    if spec.last_followup is not None:
        df = df[df["followup_time"] <= spec.last_followup]
    if spec.where_case:
        df = df[evaluate_predicate(spec.where_case, df)]
    if len(df) == 0:
        raise EmptyDataError("no rows remain after follow-up window / where_case filtering")
    df = df.reset_index(drop=True)

    df = truncate_weights(df, spec.analysis_weights)
    w = df["weight"].to_numpy(dtype=float)
    if spec.use_sample_weights:
        if "sample_weight" not in df.columns:
            raise SchemaError("use_sample_weights is set but the data have no sample_weight column")
        w = w * df["sample_weight"].to_numpy(dtype=float)

    terms = spec.design_terms()
    info = DesignInfo.fit(terms, df, categorical=categorical)
    X, names = info.transform(df)
    y = df["outcome"].to_numpy(dtype=float)
    glm_fit = fit_weighted_logistic(X, y, w, column_names=names)
    Xk = glm_fit.select_columns(X)
    robust = cluster_sandwich_covariance(glm_fit, Xk, y, w, df["id"].to_numpy())
    return MsmFit(
        glm=glm_fit,
        robust=robust,
        design=info,
        spec=spec,
        estimand=estimand,
        n_individuals=int(df["id"].nunique()),
        n_rows=len(df),
        categorical=tuple(categorical),
    )


def summarize_msm(fit: MsmFit) -> pd.DataFrame:
    """Coefficient table with robust SEs, Wald 95% CIs, z and p values."""
    return fit.summary()
