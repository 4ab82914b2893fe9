"""Synthetic longitudinal data with treatment switching and dependent censoring.

One individual at a time (with its own RNG substream derived from
(seed, id), so generation is order-independent and reproducible), for
visits j = 0..max_visit:

* X1: binary, logit = -1 * previous treatment (0.5 at j=0)
* X2: normal, mean -0.3 * previous treatment, sd 1
* X3 ~ Bernoulli(0.5), X4 ~ N(0,1), age_0 ~ N(35, 12^2) rounded to an
  integer, age incremented by 1 per visit, age_s = (age - 35) / 12
* treatment: logit = prev_treatment + 0.5 X1 + 0.5 X2 - 0.2 X3 + X4 - 0.3 age_s
* outcome (while event-free): logit = -5 - 1.2 A + 0.5 X1 + 0.5 X2 + X3 + X4 + 0.5 age_s
* censoring (when the outcome did not occur in the same visit):
  logit = -1 - prev_treatment - 0.5 X1 + 0.5 X2 - 0.2 X3 + 0.2 X4 - age_s

Eligibility at visit j means age >= 18, no treatment at any earlier
visit and no earlier outcome event.  Rows before the first eligible
visit are dropped; an event or censoring row ends the trajectory but is
itself retained.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import pandas as pd

from .data_model import ColumnMap, LongitudinalDataset, from_frame
from .errors import ParameterError

SIM_COLUMNS = ["ID", "t", "A", "X1", "X2", "X3", "X4", "age", "age_s", "Y", "C", "eligible"]


def simulated_column_map() -> ColumnMap:
    """Column map matching the simulator's CSV schema."""
    return ColumnMap(
        id="ID",
        period="t",
        treatment="A",
        outcome="Y",
        eligible="eligible",
        censored="C",
        covariates={
            "X1": "binary",
            "X2": "continuous",
            "X3": "binary",
            "X4": "continuous",
            "age": "continuous",
            "age_s": "continuous",
        },
    )


@dataclass(frozen=True)
class TreatmentModel:
    intercept: float = 0.0
    prev_treatment: float = 1.0
    x1: float = 0.5
    x2: float = 0.5
    x3: float = -0.2
    x4: float = 1.0
    age_s: float = -0.3


@dataclass(frozen=True)
class OutcomeModel:
    intercept: float = -5.0
    treatment: float = -1.2
    x1: float = 0.5
    x2: float = 0.5
    x3: float = 1.0
    x4: float = 1.0
    age_s: float = 0.5


@dataclass(frozen=True)
class CensoringModel:
    intercept: float = -1.0
    prev_treatment: float = -1.0
    x1: float = -0.5
    x2: float = 0.5
    x3: float = -0.2
    x4: float = 0.2
    age_s: float = -1.0


@dataclass(frozen=True)
class ConfounderModel:
    x1_prev_treatment: float = -1.0
    x2_prev_treatment: float = -0.3


@dataclass(frozen=True)
class SimConfig:
    n: int = 1000
    max_visit: int = 9
    seed: int = 1
    treatment: TreatmentModel = field(default_factory=TreatmentModel)
    outcome: OutcomeModel = field(default_factory=OutcomeModel)
    censoring: CensoringModel = field(default_factory=CensoringModel)
    confounders: ConfounderModel = field(default_factory=ConfounderModel)
    disable_censoring: bool = False
    disable_confounding: bool = False

    def __post_init__(self):
        if self.n < 0:
            raise ParameterError(f"n must be >= 0, got {self.n}")
        if self.max_visit < 0:
            raise ParameterError(f"max_visit must be >= 0, got {self.max_visit}")

    def with_overrides(self, overrides: dict[str, float]) -> "SimConfig":
        """Apply dotted-key overrides such as {'outcome.treatment': 0.0}."""
        cfg = self
        for key, value in overrides.items():
            block, _, name = key.partition(".")
            if block not in ("treatment", "outcome", "censoring", "confounders") or not name:
                raise ParameterError(f"unknown override '{key}'")
            sub = getattr(cfg, block)
            if not hasattr(sub, name):
                raise ParameterError(f"unknown override '{key}'")
            cfg = replace(cfg, **{block: replace(sub, **{name: float(value)})})
        return cfg


def _logistic(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def simulate_dataset(config: SimConfig) -> LongitudinalDataset:
    """Generate a validated dataset; the same seed gives a byte-identical result."""
    rows: list[tuple] = []
    tm, om, cm, fm = config.treatment, config.outcome, config.censoring, config.confounders
    for ident in range(1, config.n + 1):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(ident,)))
        x3 = int(rng.random() < 0.5)
        x4 = float(rng.normal())
        age0 = int(round(rng.normal(35.0, 12.0)))

        prev_a = 0
        treated_before = False
        person: list[tuple] = []
        first_eligible: Optional[int] = None
        for j in range(config.max_visit + 1):
            x1 = int(rng.random() < _logistic(fm.x1_prev_treatment * prev_a))
            x2 = float(rng.normal(fm.x2_prev_treatment * prev_a, 1.0))
            age = age0 + j
            age_s = (age - 35.0) / 12.0

            eligible = int(age >= 18 and not treated_before)
            if eligible and first_eligible is None:
                first_eligible = j

            if config.disable_confounding:
                eta_a = tm.intercept + tm.prev_treatment * prev_a
            else:
                eta_a = (
                    tm.intercept + tm.prev_treatment * prev_a + tm.x1 * x1 + tm.x2 * x2
                    + tm.x3 * x3 + tm.x4 * x4 + tm.age_s * age_s
                )
            a = int(rng.random() < _logistic(eta_a))

            eta_y = (
                om.intercept + om.treatment * a + om.x1 * x1 + om.x2 * x2
                + om.x3 * x3 + om.x4 * x4 + om.age_s * age_s
            )
            y = int(rng.random() < _logistic(eta_y))

            c = 0
            if y == 0 and not config.disable_censoring:
                eta_c = (
                    cm.intercept + cm.prev_treatment * prev_a + cm.x1 * x1 + cm.x2 * x2
                    + cm.x3 * x3 + cm.x4 * x4 + cm.age_s * age_s
                )
                c = int(rng.random() < _logistic(eta_c))

            person.append((ident, j, a, x1, x2, x3, x4, age, age_s, y, c, eligible))
            if a == 1:
                treated_before = True
            prev_a = a
            if y == 1 or c == 1:
                break

        if first_eligible is not None:
            rows.extend(r for r in person if r[1] >= first_eligible)

    frame = pd.DataFrame(rows, columns=SIM_COLUMNS)
    if len(frame) == 0:
        frame = pd.DataFrame({c: pd.Series(dtype=float) for c in SIM_COLUMNS})
    return from_frame(frame, simulated_column_map(), validate=True)


def write_simulated_csv(ds: LongitudinalDataset, path) -> None:
    """Write in the fixed column order ID, t, A, X1..X4, age, age_s, Y, C, eligible."""
    cm = ds.column_map
    renames = {
        "id": cm.id, "period": cm.period, "treatment": cm.treatment,
        "outcome": cm.outcome, "eligible": cm.eligible, "censored": cm.censored,
    }
    out = ds.frame.rename(columns=renames)
    out[SIM_COLUMNS].to_csv(path, index=False)
