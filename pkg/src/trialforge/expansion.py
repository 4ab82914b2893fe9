"""Expansion of person-period records into the sequence-of-trials layout.

Every period where an individual is eligible opens a trial; the
individual's remaining observed periods become that trial's follow-up
rows, with baseline covariates snapshotted from the trial's first
period.  Under the per-protocol estimand, a trial's rows stop at the
first deviation from the baseline treatment (the deviating period is
not emitted).  A terminal event row is emitted; nothing follows an
event or censoring by dataset validation.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pandas as pd

from .data_model import LongitudinalDataset, read_csv_exact
from .errors import ParameterError, TrialForgeError

MODEL_VARS = ("assigned_treatment", "dose")


class Estimand(str, enum.Enum):
    ITT = "ITT"
    PP = "PP"
    AS_TREATED = "AsTreated"

    @classmethod
    def parse(cls, value) -> "Estimand":
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower().replace("-", "").replace("_", "")
        mapping = {"itt": cls.ITT, "pp": cls.PP, "astreated": cls.AS_TREATED}
        if text not in mapping:
            raise ParameterError(f"unknown estimand '{value}' (expected ITT, PP or As-Treated)")
        return mapping[text]


@dataclass(frozen=True)
class ExpansionOptions:
    first_period: Optional[int] = None
    last_period: Optional[int] = None
    chunk_size: int = 500
    separate_files: bool = False
    model_var: tuple[str, ...] = ("assigned_treatment",)
    outcome_covariates: tuple[str, ...] = ()
    where_vars: tuple[str, ...] = ()

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ParameterError(f"chunk_size must be >= 1, got {self.chunk_size}")
        if (
            self.first_period is not None
            and self.last_period is not None
            and self.first_period > self.last_period
        ):
            raise ParameterError("first_period must not exceed last_period")
        model_var = tuple(self.model_var) or ("assigned_treatment",)
        for v in model_var:
            if v not in MODEL_VARS:
                raise ParameterError(f"model_var entries must be among {MODEL_VARS}, got '{v}'")
        object.__setattr__(self, "model_var", model_var)
        object.__setattr__(self, "outcome_covariates", tuple(self.outcome_covariates))
        object.__setattr__(self, "where_vars", tuple(self.where_vars))

    def snapshot_columns(self) -> list[str]:
        out = list(self.outcome_covariates)
        for v in self.where_vars:
            if v not in out:
                out.append(v)
        return out


def _group_bounds(ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per record: index of its group start and one-past-end (records sorted by id)."""
    n = len(ids)
    if n == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    new = np.empty(n, dtype=bool)
    new[0] = True
    new[1:] = ids[1:] != ids[:-1]
    start_idx = np.flatnonzero(new)
    group_no = np.cumsum(new) - 1
    starts = start_idx[group_no]
    ends_per_group = np.append(start_idx[1:], n)
    ends = ends_per_group[group_no]
    return starts, ends


def derive_time_on_regime(ds: LongitudinalDataset) -> LongitudinalDataset:
    """Attach ``time_on_regime``: periods spent on the current treatment value.

    Resets to 0 at every treatment change; the first record of an
    individual starts at 0.
    """
    frame = ds.frame.copy()
    ids = frame["id"].to_numpy()
    a = frame["treatment"].to_numpy()
    n = len(frame)
    reset = np.ones(n, dtype=bool)
    if n > 1:
        same = ids[1:] == ids[:-1]
        reset[1:] = ~same | (a[1:] != a[:-1])
    idx = np.arange(n)
    last_reset = np.maximum.accumulate(np.where(reset, idx, 0))
    frame["time_on_regime"] = (idx - last_reset).astype(np.int64)
    return LongitudinalDataset(frame, ds.column_map, validate=False)


EXPANDED_CORE = ["id", "trial_period", "followup_time", "outcome", "weight", "treatment"]


def expanded_columns(opts: ExpansionOptions) -> list[str]:
    cols = list(EXPANDED_CORE)
    cols.extend(v for v in MODEL_VARS if v in opts.model_var)
    cols.extend(opts.snapshot_columns())
    return cols


def expand(
    ds: LongitudinalDataset, estimand, opts: ExpansionOptions = ExpansionOptions()
) -> pd.DataFrame:
    """Expand the full dataset in memory; rows ordered by (id, trial, followup)."""
    estimand = Estimand.parse(estimand)
    return _expand_frame(ds.frame, estimand, opts)


def _expand_frame(frame: pd.DataFrame, estimand: Estimand, opts: ExpansionOptions) -> pd.DataFrame:
    for col in opts.snapshot_columns():
        if col not in frame.columns:
            raise TrialForgeError(f"snapshot column '{col}' not present in dataset")
    ids = frame["id"].to_numpy()
    periods = frame["period"].to_numpy()
    a = frame["treatment"].to_numpy()
    y = frame["outcome"].to_numpy()
    eligible = frame["eligible"].to_numpy()
    n = len(frame)
    g_start, g_end = _group_bounds(ids)

    start_mask = eligible == 1
    if opts.first_period is not None:
        start_mask &= periods >= opts.first_period
    if opts.last_period is not None:
        start_mask &= periods <= opts.last_period
    starts = np.flatnonzero(start_mask)
    if len(starts) == 0:
        return _empty_expanded(frame, opts)

    if estimand is Estimand.PP:
        # first record after each start whose treatment differs from the baseline
        change = np.zeros(n, dtype=bool)
        if n > 1:
            change[1:] = (ids[1:] == ids[:-1]) & (a[1:] != a[:-1])
        change_idx = np.flatnonzero(change)
        nxt = np.searchsorted(change_idx, starts, side="right")
        stop = np.minimum(np.append(change_idx, n)[nxt], g_end[starts])
        lens = stop - starts
    else:
        lens = g_end[starts] - starts

    total = int(lens.sum())
    offsets = np.repeat(np.cumsum(lens) - lens, lens)
    rep_start = np.repeat(starts, lens)
    src = rep_start + (np.arange(total) - offsets)

    data: dict[str, np.ndarray] = {
        "id": ids[src],
        "trial_period": periods[rep_start],
        "followup_time": periods[src] - periods[rep_start],
        "outcome": y[src],
        "weight": np.ones(total),
        "treatment": a[src],
    }
    if "assigned_treatment" in opts.model_var:
        data["assigned_treatment"] = a[rep_start]
    if "dose" in opts.model_var:
        csum = np.cumsum(a)
        data["dose"] = csum[src] - csum[rep_start] + a[rep_start]
    for col in opts.snapshot_columns():
        data[col] = frame[col].to_numpy()[rep_start]
    return pd.DataFrame(data, columns=expanded_columns(opts))


def _empty_expanded(frame: pd.DataFrame, opts: ExpansionOptions) -> pd.DataFrame:
    cols = expanded_columns(opts)
    out = pd.DataFrame({c: np.empty(0) for c in cols})
    for c in ("id", "trial_period", "followup_time", "outcome", "treatment"):
        out[c] = out[c].astype(np.int64)
    return out[cols]


class CsvTrialSink:
    """Appends expanded rows to one CSV per trial (``trial_<m>.csv``).

    Construction clears any trial files left by a previous run so a
    rerun cannot mix old and new trials.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
            probe = self.directory / ".write_probe"
            probe.touch()
            probe.unlink()
            for stale in self.directory.glob("trial_*.csv"):
                stale.unlink()
        except OSError as exc:
            raise TrialForgeError(f"trial output directory not writable: {self.directory}") from exc
        self._paths: dict[int, Path] = {}

    def write(self, trial_period: int, rows: pd.DataFrame) -> None:
        path = self.directory / f"trial_{trial_period}.csv"
        fresh = trial_period not in self._paths
        rows.to_csv(path, mode="w" if fresh else "a", header=fresh, index=False)
        self._paths[trial_period] = path

    def finalize(self) -> dict[int, Path]:
        return dict(sorted(self._paths.items()))


def expand_chunked(
    ds: LongitudinalDataset,
    estimand,
    opts: ExpansionOptions,
    sink: CsvTrialSink,
    row_transform: Optional[Callable[[pd.DataFrame], pd.DataFrame]] = None,
) -> dict[int, Path]:
    """Expand in chunks of ``opts.chunk_size`` individuals into per-trial files.

    ``row_transform`` (e.g. weight attachment) runs on each chunk's
    expanded rows before writing; the multiset of written rows equals
    the in-memory expansion bit-exactly.
    """
    estimand = Estimand.parse(estimand)
    frame = ds.frame
    unique_ids = frame["id"].unique()
    for lo in range(0, len(unique_ids), opts.chunk_size):
        chunk_ids = unique_ids[lo : lo + opts.chunk_size]
        chunk = frame[frame["id"].isin(chunk_ids)]
        rows = _expand_frame(chunk, estimand, opts)
        if row_transform is not None:
            rows = row_transform(rows)
        for trial, trial_rows in rows.groupby("trial_period", sort=True):
            sink.write(int(trial), trial_rows)
    return sink.finalize()


def sort_trial_files(manifest: dict[int, Path]) -> None:
    """Rewrite each trial file sorted by (id, trial_period, followup_time)."""
    for path in manifest.values():
        rows = read_csv_exact(path)
        rows = rows.sort_values(["id", "trial_period", "followup_time"], kind="mergesort")
        rows.to_csv(path, index=False)


def read_trial_files(directory) -> pd.DataFrame:
    """Concatenate trial_<m>.csv files in ascending trial order."""
    directory = Path(directory)
    paths = sorted(directory.glob("trial_*.csv"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise TrialForgeError(f"no trial_<m>.csv files found in {directory}")
    return pd.concat([read_csv_exact(p) for p in paths], ignore_index=True)
