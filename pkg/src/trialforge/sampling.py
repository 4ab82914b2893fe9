"""Case-control subsampling of expanded rows with 1/p control weights.

Every event row is kept; each control row survives independently with
probability ``p_control`` and carries ``sample_weight = 1/p_control``.
Per-row decisions come from a counter-style keyed hash of
(seed, id, trial_period, followup_time), so a row's fate does not
depend on dataset ordering or chunk boundaries: sampling chunked
per-trial files and sampling the in-memory expansion give identical
results for the same seed.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from .errors import DataWarning, ParameterError
from .predicates import evaluate_predicate

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xBF58476D1CE4E5B9)
_M3 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finaliser; wraps modulo 2**64."""
    z = (z + _M1).astype(np.uint64)
    z = ((z ^ (z >> np.uint64(30))) * _M2).astype(np.uint64)
    z = ((z ^ (z >> np.uint64(27))) * _M3).astype(np.uint64)
    return z ^ (z >> np.uint64(31))


def keyed_uniform(seed: int, *keys: np.ndarray) -> np.ndarray:
    """Uniform [0,1) per row, a pure function of (seed, keys)."""
    h = np.full(len(keys[0]) if keys else 0, np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    for key in keys:
        h = _mix64(h ^ _mix64(np.asarray(key).astype(np.int64).view(np.uint64)))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


@dataclass(frozen=True)
class SamplingOptions:
    p_control: float
    seed: int
    subset_condition: Optional[str] = None
    sort: bool = True

    def __post_init__(self):
        if not 0.0 < self.p_control <= 1.0:
            raise ParameterError(f"p_control must be in (0, 1], got {self.p_control}")


def case_control_sample(expanded: pd.DataFrame, opts: SamplingOptions) -> pd.DataFrame:
    """Subsample controls within every (trial, follow-up visit) stratum.

    With ``sort`` the rows are ordered by (id, trial_period,
    followup_time) before sampling so the output is canonical across
    chunked and in-memory inputs.
    """
    df = expanded
    if opts.subset_condition:
        df = df[evaluate_predicate(opts.subset_condition, df)]
    if opts.sort:
        df = df.sort_values(["id", "trial_period", "followup_time"], kind="mergesort")
    df = df.reset_index(drop=True)

    u = keyed_uniform(
        opts.seed,
        df["id"].to_numpy(),
        df["trial_period"].to_numpy(),
        df["followup_time"].to_numpy(),
    )
    is_case = df["outcome"].to_numpy() == 1
    keep = is_case | (u < opts.p_control)
    out = df[keep].reset_index(drop=True)
    out["sample_weight"] = np.where(is_case[keep], 1.0, 1.0 / opts.p_control)

    n_cases = int(is_case.sum())
    n_controls = int(keep.sum()) - n_cases
    if n_cases > 0 and n_controls < 10 * n_cases:
        warnings.warn(
            f"only {n_controls} controls kept for {n_cases} cases; consider a larger "
            "p_control (a 10:1 ratio or more preserves efficiency)",
            DataWarning,
            stacklevel=2,
        )
    return out
