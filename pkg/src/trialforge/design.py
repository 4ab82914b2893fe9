"""Model formulas, natural cubic spline bases and design matrices.

Formula mini-language, used by the CLI and run configs::

    y ~ 1 + X1 + X2 + pow(t,2) + ns(followup_time,3) + X3:X4

Terms are separated by ``+``.  ``pow(var,k)`` is an integer power
(k >= 2), ``ns(var,df)`` a natural cubic spline basis with ``df``
columns, and ``a:b`` the elementwise product of two single-column
terms.  The intercept ``1`` is implied when omitted and is always the
first column of the design matrix.

Spline knots and categorical levels are frozen when a design is fitted,
so evaluating the same design on new data reproduces the training
basis exactly.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .errors import FormulaError, ParameterError, SchemaError, ValidationError

_NAME = r"[A-Za-z_][A-Za-z0-9_.]*"
_FUNC_RE = re.compile(rf"^(ns|pow)\(\s*({_NAME})\s*,\s*(\d+)\s*\)$")
_NAME_RE = re.compile(rf"^{_NAME}$")


@dataclass(frozen=True)
class TermSpec:
    """One design term: intercept, linear, power, spline or interaction."""

    kind: str
    var: Optional[str] = None
    exponent: Optional[int] = None
    df: Optional[int] = None
    parents: Optional[tuple["TermSpec", "TermSpec"]] = None

    def __post_init__(self):
        if self.kind == "power" and (self.exponent is None or self.exponent < 2):
            raise FormulaError(f"pow exponent must be an integer >= 2, got {self.exponent}")
        if self.kind == "spline" and (self.df is None or self.df < 1):
            raise FormulaError(f"spline df must be >= 1, got {self.df}")

    def formula_text(self) -> str:
        """Grammar representation (parses back); ``1`` for the intercept."""
        return "1" if self.kind == "intercept" else self.label()

    def label(self) -> str:
        if self.kind == "intercept":
            return "(Intercept)"
        if self.kind == "linear":
            return self.var
        if self.kind == "power":
            return f"pow({self.var},{self.exponent})"
        if self.kind == "spline":
            return f"ns({self.var},{self.df})"
        if self.kind == "interaction":
            return f"{self.parents[0].label()}:{self.parents[1].label()}"
        raise FormulaError(f"unknown term kind '{self.kind}'")

    def variables(self) -> list[str]:
        if self.kind == "intercept":
            return []
        if self.kind == "interaction":
            return self.parents[0].variables() + self.parents[1].variables()
        return [self.var]

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.var is not None:
            d["var"] = self.var
        if self.exponent is not None:
            d["exponent"] = self.exponent
        if self.df is not None:
            d["df"] = self.df
        if self.parents is not None:
            d["parents"] = [p.to_dict() for p in self.parents]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TermSpec":
        parents = d.get("parents")
        return cls(
            kind=d["kind"],
            var=d.get("var"),
            exponent=d.get("exponent"),
            df=d.get("df"),
            parents=tuple(cls.from_dict(p) for p in parents) if parents else None,
        )


INTERCEPT = TermSpec(kind="intercept")


def _parse_simple(text: str) -> TermSpec:
    text = text.strip()
    m = _FUNC_RE.match(text)
    if m:
        func, var, arg = m.group(1), m.group(2), int(m.group(3))
        if func == "pow":
            return TermSpec(kind="power", var=var, exponent=arg)
        return TermSpec(kind="spline", var=var, df=arg)
    if text == "1":
        return INTERCEPT
    if _NAME_RE.match(text):
        return TermSpec(kind="linear", var=text)
    raise FormulaError(f"cannot parse term '{text}'")


def _parse_term(text: str) -> TermSpec:
    text = text.strip()
    if not text:
        raise FormulaError("empty term")
    if ":" in text:
        pieces = text.split(":")
        if len(pieces) != 2:
            raise FormulaError(f"interaction must have exactly two parents: '{text}'")
        a, b = (_parse_simple(p) for p in pieces)
        for p in (a, b):
            if p.kind not in ("linear", "power"):
                raise FormulaError(f"interaction parents must be single-column terms: '{text}'")
        return TermSpec(kind="interaction", parents=(a, b))
    return _parse_simple(text)


def parse_terms(text: str) -> list[TermSpec]:
    """Parse a right-hand side such as ``1 + X1 + ns(t,3)`` into term specs.

    A single leading intercept is enforced: one is prepended when absent,
    and a ``1`` anywhere but first is rejected.
    """
    terms = [_parse_term(t) for t in text.split("+")] if text.strip() else []
    n_icpt = sum(1 for t in terms if t.kind == "intercept")
    if n_icpt > 1 or (n_icpt == 1 and terms[0].kind != "intercept"):
        raise FormulaError("intercept '1' may appear only once, first")
    if n_icpt == 0:
        terms = [INTERCEPT] + terms
    return terms


@dataclass(frozen=True)
class ModelFormula:
    """Response column plus ordered terms; the intercept is always first."""

    response: str
    terms: tuple[TermSpec, ...]

    def __post_init__(self):
        if not self.terms or self.terms[0].kind != "intercept":
            raise FormulaError("formula must start with an intercept term")
        if sum(1 for t in self.terms if t.kind == "intercept") != 1:
            raise FormulaError("formula must contain exactly one intercept")

    def variables(self) -> list[str]:
        out: list[str] = []
        for t in self.terms:
            for v in t.variables():
                if v not in out:
                    out.append(v)
        return out


def parse_formula(text: str) -> ModelFormula:
    """Parse ``response ~ term + term + ...``."""
    if "~" not in text:
        raise FormulaError(f"formula needs '~': '{text}'")
    lhs, rhs = text.split("~", 1)
    response = lhs.strip()
    if not _NAME_RE.match(response):
        raise FormulaError(f"bad response name '{response}'")
    return ModelFormula(response=response, terms=tuple(parse_terms(rhs)))


# ---------------------------------------------------------------------------
# Natural cubic splines


@dataclass(frozen=True)
class SplineBasisSpec:
    """Frozen knots for a natural cubic spline basis with ``df`` columns."""

    df: int
    interior_knots: tuple[float, ...]
    boundary_knots: tuple[float, float]

    def __post_init__(self):
        if self.df < 1:
            raise ParameterError(f"spline df must be >= 1, got {self.df}")
        lo, hi = self.boundary_knots
        if not lo < hi:
            raise ParameterError(f"degenerate boundary knots [{lo}, {hi}]")
        if len(self.interior_knots) != self.df - 1:
            raise ParameterError(
                f"need df-1={self.df - 1} interior knots, got {len(self.interior_knots)}"
            )
        for k in self.interior_knots:
            if not lo < k < hi:
                raise ParameterError(f"interior knot {k} not strictly inside [{lo}, {hi}]")
        if len(set(self.interior_knots)) != len(self.interior_knots):
            raise ParameterError("interior knots must be distinct")

    @property
    def all_knots(self) -> np.ndarray:
        return np.asarray([self.boundary_knots[0], *self.interior_knots, self.boundary_knots[1]])

    def to_dict(self) -> dict:
        return {
            "df": self.df,
            "interior_knots": list(self.interior_knots),
            "boundary_knots": list(self.boundary_knots),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplineBasisSpec":
        return cls(
            df=int(d["df"]),
            interior_knots=tuple(float(k) for k in d["interior_knots"]),
            boundary_knots=(float(d["boundary_knots"][0]), float(d["boundary_knots"][1])),
        )


def spline_spec_from_data(x: np.ndarray, df: int) -> SplineBasisSpec:
    """Place df-1 interior knots at equally spaced quantiles, boundaries at min/max."""
    if df < 1:
        raise ParameterError(f"spline df must be >= 1, got {df}")
    x = np.asarray(x, dtype=float)
    lo, hi = float(np.min(x)), float(np.max(x))
    if not lo < hi:
        raise ParameterError(f"cannot place spline knots on constant values (x = {lo})")
    probs = np.arange(1, df) / df
    interior = tuple(float(q) for q in np.quantile(x, probs))
    return SplineBasisSpec(df=df, interior_knots=interior, boundary_knots=(lo, hi))


def natural_spline_basis(x: np.ndarray, spec: SplineBasisSpec) -> np.ndarray:
    """Evaluate the natural cubic spline basis (len(x) x df).

    The basis uses the truncated-power construction on knots
    ``(b0, interior..., b1)``: the first column is the linear rescaling
    ``(x - b0) / (b1 - b0)`` and column j+1 is ``(d_j(x) - d_last(x))``
    scaled by ``(b1 - b0)^-2``, with ``d_j(x) = ((x-k_j)^3_+ -
    (x-k_K)^3_+) / (k_K - k_j)``.  Every column is cubic between knots,
    C2-continuous, and exactly linear at and beyond both boundary knots,
    so out-of-range evaluation extrapolates linearly.
    """
    x = np.asarray(x, dtype=float)
    knots = spec.all_knots
    b0, b1 = spec.boundary_knots
    span = b1 - b0
    out = np.empty((x.shape[0], spec.df))
    out[:, 0] = (x - b0) / span
    if spec.df == 1:
        return out

    last = knots[-1]

    def d(k):
        pos_k = np.clip(x - k, 0.0, None) ** 3
        pos_last = np.clip(x - last, 0.0, None) ** 3
        return (pos_k - pos_last) / (last - k)

    d_last = d(knots[-2])
    for j in range(spec.df - 1):
        out[:, j + 1] = (d(knots[j]) - d_last) / span**2
    return out


# ---------------------------------------------------------------------------
# Design matrices


@dataclass
class DesignInfo:
    """A fitted design: terms plus frozen spline knots and categorical levels.

    ``transform`` evaluates the design on any frame carrying the needed
    variables; training-time knots and levels are reused, which is what
    prediction on new data requires.
    """

    terms: list[TermSpec]
    spline_specs: dict[int, SplineBasisSpec] = field(default_factory=dict)
    categorical_levels: dict[str, list[str]] = field(default_factory=dict)

    @classmethod
    def fit(
        cls,
        terms: Sequence[TermSpec],
        frame: pd.DataFrame,
        categorical: Sequence[str] = (),
    ) -> "DesignInfo":
        info = cls(terms=list(terms))
        for idx, term in enumerate(info.terms):
            for v in term.variables():
                if v not in frame.columns:
                    raise SchemaError(f"formula variable '{v}' not found in data")
            if term.kind == "spline":
                info.spline_specs[idx] = spline_spec_from_data(frame[term.var].to_numpy(), term.df)
            if term.kind in ("linear",) and v_is_categorical(frame, term.var, categorical):
                levels = sorted(frame[term.var].astype(str).unique())
                info.categorical_levels[term.var] = levels
            if term.kind in ("power", "spline", "interaction"):
                for v in term.variables():
                    if v in categorical:
                        raise FormulaError(
                            f"categorical variable '{v}' may only appear as a plain linear term"
                        )
        return info

    def transform(self, frame: pd.DataFrame) -> tuple[np.ndarray, list[str]]:
        cols: list[np.ndarray] = []
        names: list[str] = []
        n = len(frame)
        for idx, term in enumerate(self.terms):
            for v in term.variables():
                if v not in frame.columns:
                    raise SchemaError(f"formula variable '{v}' not found in data")
            if term.kind == "intercept":
                cols.append(np.ones(n))
                names.append(term.label())
            elif term.kind == "linear" and term.var in self.categorical_levels:
                levels = self.categorical_levels[term.var]
                vals = frame[term.var].astype(str).to_numpy()
                unseen = set(vals) - set(levels)
                if unseen:
                    raise SchemaError(
                        f"categorical '{term.var}' has unseen level(s) {sorted(unseen)}"
                    )
                for lvl in levels[1:]:  # reference = lexicographically smallest
                    cols.append((vals == lvl).astype(float))
                    names.append(f"{term.var}[{lvl}]")
            elif term.kind == "linear":
                cols.append(_numeric(frame, term.var))
                names.append(term.label())
            elif term.kind == "power":
                cols.append(_numeric(frame, term.var) ** term.exponent)
                names.append(term.label())
            elif term.kind == "spline":
                spec = self.spline_specs[idx]
                basis = natural_spline_basis(frame[term.var].to_numpy(), spec)
                for j in range(spec.df):
                    cols.append(basis[:, j])
                    names.append(f"{term.label()}#{j + 1}")
            elif term.kind == "interaction":
                a, b = term.parents
                col = _simple_column(frame, a) * _simple_column(frame, b)
                cols.append(col)
                names.append(term.label())
            else:
                raise FormulaError(f"unknown term kind '{term.kind}'")
        matrix = np.column_stack(cols) if cols else np.empty((n, 0))
        bad = ~np.isfinite(matrix)
        if bad.any():
            row = int(np.argwhere(bad)[0][0])
            raise ValidationError(f"non-finite design value at row {row}, column '{names[int(np.argwhere(bad)[0][1])]}'")
        return matrix, names

    def column_names(self, frame: pd.DataFrame) -> list[str]:
        return self.transform(frame.head(0))[1] if len(frame) else self.transform(frame)[1]

    def to_dict(self) -> dict:
        return {
            "terms": [t.to_dict() for t in self.terms],
            "spline_specs": {str(i): s.to_dict() for i, s in self.spline_specs.items()},
            "categorical_levels": self.categorical_levels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DesignInfo":
        return cls(
            terms=[TermSpec.from_dict(t) for t in d["terms"]],
            spline_specs={int(i): SplineBasisSpec.from_dict(s) for i, s in d.get("spline_specs", {}).items()},
            categorical_levels={k: list(v) for k, v in d.get("categorical_levels", {}).items()},
        )


def v_is_categorical(frame: pd.DataFrame, var: str, categorical: Sequence[str]) -> bool:
    return var in categorical


def _numeric(frame: pd.DataFrame, var: str) -> np.ndarray:
    vals = pd.to_numeric(frame[var], errors="coerce").to_numpy(dtype=float)
    return vals


def _simple_column(frame: pd.DataFrame, term: TermSpec) -> np.ndarray:
    if term.kind == "linear":
        return _numeric(frame, term.var)
    if term.kind == "power":
        return _numeric(frame, term.var) ** term.exponent
    raise FormulaError(f"term '{term.label()}' cannot be used inside an interaction")


def build_design_matrix(
    formula: ModelFormula | Sequence[TermSpec],
    frame: pd.DataFrame,
    categorical: Sequence[str] = (),
) -> tuple[np.ndarray, list[str]]:
    """Fit-and-transform convenience: one matrix row per input row.

    Column order follows term order, with multi-column terms expanding
    in place and deterministic names (``pow(t,2)``, ``ns(x,3)#j``).
    """
    terms = formula.terms if isinstance(formula, ModelFormula) else list(formula)
    info = DesignInfo.fit(terms, frame, categorical=categorical)
    return info.transform(frame)
