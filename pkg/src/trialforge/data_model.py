"""Ingestion and validation of person-period longitudinal records.

The observational input is one row per (individual, visit) in "long"
format.  A :class:`ColumnMap` names the roles of the user's columns;
loading normalises them to the canonical names used throughout the
package (``id``, ``period``, ``treatment``, ``outcome``, ``eligible``,
``censored``) while covariates keep their original names.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .errors import SchemaError, ValidationError

CANONICAL_ROLES = ("id", "period", "treatment", "outcome", "eligible", "censored")
INDICATOR_ROLES = ("treatment", "outcome", "eligible", "censored")

#: Derived column names the pipeline creates; covariates may not shadow them.
RESERVED_NAMES = CANONICAL_ROLES + (
    "time_on_regime",
    "trial_period",
    "followup_time",
    "assigned_treatment",
    "dose",
    "weight",
    "sample_weight",
)

COVARIATE_KINDS = ("binary", "continuous", "categorical")


def read_csv_exact(path) -> pd.DataFrame:
    """read_csv with round-trip float parsing, so write-read cycles are exact."""
    return pd.read_csv(path, encoding="utf-8", float_precision="round_trip")


@dataclass(frozen=True)
class ColumnMap:
    """Mapping from roles to the column names of the user's file.

    ``covariates`` maps each covariate column to its declared kind
    (``binary``, ``continuous`` or ``categorical``).
    """

    id: str = "id"
    period: str = "period"
    treatment: str = "treatment"
    outcome: str = "outcome"
    eligible: str = "eligible"
    censored: Optional[str] = None
    covariates: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        names = [self.id, self.period, self.treatment, self.outcome, self.eligible]
        if self.censored is not None:
            names.append(self.censored)
        names.extend(self.covariates)
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise SchemaError(f"column map names must be distinct, got duplicates: {sorted(dupes)}")
        for cov, kind in self.covariates.items():
            if kind not in COVARIATE_KINDS:
                raise SchemaError(f"covariate '{cov}' has unknown kind '{kind}'")
            if cov in RESERVED_NAMES:
                raise SchemaError(f"covariate name '{cov}' collides with a reserved column name")

    @property
    def covariate_names(self) -> list[str]:
        return list(self.covariates)

    def required_columns(self) -> list[str]:
        cols = [self.id, self.period, self.treatment, self.outcome, self.eligible]
        if self.censored is not None:
            cols.append(self.censored)
        cols.extend(self.covariates)
        return cols

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "period": self.period,
            "treatment": self.treatment,
            "outcome": self.outcome,
            "eligible": self.eligible,
            "censored": self.censored,
            "covariates": dict(self.covariates),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnMap":
        return cls(
            id=d.get("id", "id"),
            period=d.get("period", "period"),
            treatment=d.get("treatment", "treatment"),
            outcome=d.get("outcome", "outcome"),
            eligible=d.get("eligible", "eligible"),
            censored=d.get("censored"),
            covariates=dict(d.get("covariates", {})),
        )


@dataclass
class RuleResult:
    """One validation rule outcome: violation count and first offender."""

    rule: str
    count: int = 0
    first_row: Optional[int] = None
    detail: str = ""

    def record(self, row: int, detail: str = ""):
        if self.count == 0:
            self.first_row = row
            self.detail = detail
        self.count += 1


@dataclass
class ValidationReport:
    rules: list[RuleResult]

    @property
    def ok(self) -> bool:
        return all(r.count == 0 for r in self.rules)

    @property
    def total_violations(self) -> int:
        return sum(r.count for r in self.rules)

    def summary(self) -> str:
        lines = []
        for r in self.rules:
            status = "ok" if r.count == 0 else f"{r.count} violation(s), first at row {r.first_row}"
            extra = f" ({r.detail})" if r.detail else ""
            lines.append(f"  {r.rule}: {status}{extra}")
        return "\n".join(lines)


class LongitudinalDataset:
    """Validated person-period records, sorted by (id, period).

    The frame is immutable by convention: all operations return new
    objects, so a dataset can be shared freely across threads.
    """

    def __init__(self, frame: pd.DataFrame, column_map: ColumnMap, validate: bool = True):
        self.column_map = column_map
        frame = frame.sort_values(["id", "period"], kind="mergesort").reset_index(drop=True)
        self.frame = frame
        if validate:
            report = _check_rules(frame, column_map)
            if not report.ok:
                bad = [r for r in report.rules if r.count]
                msgs = "; ".join(f"{r.rule}: {r.detail or r.count}" for r in bad)
                raise ValidationError(f"dataset failed validation: {msgs}")

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def covariate_names(self) -> list[str]:
        return self.column_map.covariate_names

    @property
    def n_individuals(self) -> int:
        return int(self.frame["id"].nunique())

    def to_csv(self, path) -> None:
        """Serialise back to the user's column names (round-trips with load)."""
        cm = self.column_map
        renames = {
            "id": cm.id,
            "period": cm.period,
            "treatment": cm.treatment,
            "outcome": cm.outcome,
            "eligible": cm.eligible,
        }
        out = self.frame.copy()
        cols = ["id", "period", "treatment", "outcome", "eligible"]
        if cm.censored is not None:
            renames["censored"] = cm.censored
            cols.append("censored")
        elif "censored" in out.columns:
            out = out.drop(columns=["censored"])
        cols.extend(cm.covariate_names)
        extra = [c for c in out.columns if c not in cols and c not in ("censored",)]
        out = out[cols + extra].rename(columns=renames)
        out.to_csv(path, index=False)


def _canonicalise(raw: pd.DataFrame, cm: ColumnMap, source: str) -> pd.DataFrame:
    missing = [c for c in cm.required_columns() if c not in raw.columns]
    if missing:
        raise SchemaError(f"{source}: missing column(s) {missing}")
    renames = {cm.id: "id", cm.period: "period", cm.treatment: "treatment",
               cm.outcome: "outcome", cm.eligible: "eligible"}
    if cm.censored is not None:
        renames[cm.censored] = "censored"
    frame = raw[cm.required_columns()].rename(columns=renames).copy()
    if "censored" not in frame.columns:
        frame["censored"] = 0

    for col in ("id", "period"):
        vals = pd.to_numeric(frame[col], errors="coerce")
        if vals.isna().any():
            row = int(vals.index[vals.isna()][0])
            raise ValidationError(f"{source}: non-numeric {col} at row {row}")
        if not np.allclose(vals, np.round(vals)):
            raise ValidationError(f"{source}: {col} must be integer-valued")
        frame[col] = vals.astype(np.int64)

    for col in INDICATOR_ROLES:
        vals = pd.to_numeric(frame[col], errors="coerce")
        bad = ~vals.isin([0, 1]) | vals.isna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise ValidationError(
                f"{source}: indicator column '{col}' must be 0/1; offending row {row} "
                f"(value {frame[col].iloc[row]!r})"
            )
        frame[col] = vals.astype(np.int64)

    for cov, kind in cm.covariates.items():
        if kind == "categorical":
            if frame[cov].isna().any():
                row = int(np.flatnonzero(frame[cov].isna().to_numpy())[0])
                raise ValidationError(f"{source}: missing value for covariate '{cov}' at row {row}")
            frame[cov] = frame[cov].astype(str)
            continue
        vals = pd.to_numeric(frame[cov], errors="coerce")
        bad = vals.isna() | ~np.isfinite(vals)
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise ValidationError(
                f"{source}: covariate '{cov}' must be finite numeric; offending row {row}"
            )
        if kind == "binary" and not vals.isin([0, 1]).all():
            row = int(np.flatnonzero(~vals.isin([0, 1]).to_numpy())[0])
            raise ValidationError(f"{source}: binary covariate '{cov}' must be 0/1; offending row {row}")
        frame[cov] = vals.astype(np.float64)
    return frame


def _check_rules(frame: pd.DataFrame, cm: ColumnMap) -> ValidationReport:
    rules = {
        name: RuleResult(name)
        for name in (
            "indicator_domain",
            "finite_covariates",
            "duplicate_period",
            "record_after_terminal",
            "outcome_and_censored",
        )
    }
    for col in INDICATOR_ROLES:
        if col not in frame.columns:
            continue
        bad = ~frame[col].isin([0, 1])
        for row in np.flatnonzero(bad.to_numpy()):
            rules["indicator_domain"].record(int(row), f"{col} not in {{0,1}}")
    for cov, kind in cm.covariates.items():
        if kind == "categorical" or cov not in frame.columns:
            continue
        vals = pd.to_numeric(frame[cov], errors="coerce")
        bad = vals.isna() | ~np.isfinite(vals)
        for row in np.flatnonzero(bad.to_numpy()):
            rules["finite_covariates"].record(int(row), f"{cov} not finite")

    ids = frame["id"].to_numpy()
    periods = frame["period"].to_numpy()
    same_id = np.zeros(len(frame), dtype=bool)
    if len(frame) > 1:
        same_id[1:] = ids[1:] == ids[:-1]
    dup = same_id & np.concatenate([[False], periods[1:] == periods[:-1]]) if len(frame) > 1 else same_id
    for row in np.flatnonzero(dup):
        rules["duplicate_period"].record(int(row), f"id {ids[row]} repeats period {periods[row]}")

    if len(frame) > 1:
        terminal_prev = (frame["outcome"].to_numpy()[:-1] == 1) | (frame["censored"].to_numpy()[:-1] == 1)
        after_terminal = np.concatenate([[False], terminal_prev]) & same_id
        for row in np.flatnonzero(after_terminal):
            rules["record_after_terminal"].record(int(row), f"id {ids[row]} has a record after outcome/censoring")

    both = (frame["outcome"] == 1) & (frame["censored"] == 1)
    for row in np.flatnonzero(both.to_numpy()):
        rules["outcome_and_censored"].record(int(row), f"id {ids[row]} has outcome=1 and censored=1 in one period")

    return ValidationReport(list(rules.values()))


def load_longitudinal_csv(path, column_map: ColumnMap) -> LongitudinalDataset:
    """Load and validate a person-period CSV (comma-delimited, UTF-8, header row).

    Raises :class:`SchemaError` when a mapped column is absent and
    :class:`ValidationError` on the first invariant violation.
    """
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"input file not found: {path}")
    raw = read_csv_exact(path)
    frame = _canonicalise(raw, column_map, source=str(path))
    return LongitudinalDataset(frame, column_map, validate=True)


def from_frame(raw: pd.DataFrame, column_map: ColumnMap, validate: bool = True) -> LongitudinalDataset:
    """Build a dataset from an in-memory frame that uses the mapped column names."""
    frame = _canonicalise(raw, column_map, source="<frame>")
    return LongitudinalDataset(frame, column_map, validate=validate)


def validate_dataset(ds: LongitudinalDataset) -> ValidationReport:
    """Report-only validation: per-rule violation counts and first offending row."""
    return _check_rules(ds.frame, ds.column_map)


def first_eligible_period(ds: LongitudinalDataset) -> pd.Series:
    """Per id, the first period with eligible=1 (ids never eligible are absent)."""
    f = ds.frame
    elig = f[f["eligible"] == 1]
    return elig.groupby("id")["period"].min()
