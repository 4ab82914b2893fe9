"""Tiny predicate language for row filters (``where_case``, ``subset_condition``).

Grammar: ``comparison (and comparison)*`` where a comparison is
``variable OP literal`` with OP one of ``== != < <= > >=`` and the
literal a number or a quoted string.  Example: ``age >= 30 and X3 == 1``.
"""
from __future__ import annotations

import re

import numpy as np
import pandas as pd

from .errors import FormulaError, SchemaError

_COMP_RE = re.compile(
    r"^\s*([A-Za-z_][A-Za-z0-9_.]*)\s*(==|!=|<=|>=|<|>)\s*"
    r"('(?:[^']*)'|\"(?:[^\"]*)\"|[-+]?[0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*$"
)

_OPS = {
    "==": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
}


def parse_predicate(text: str) -> list[tuple[str, str, object]]:
    """Parse into (variable, op, literal) clauses joined by ``and``."""
    clauses = []
    for piece in re.split(r"\band\b", text):
        m = _COMP_RE.match(piece)
        if not m:
            raise FormulaError(f"cannot parse condition '{piece.strip()}'")
        var, op, lit = m.group(1), m.group(2), m.group(3)
        if lit[0] in "'\"":
            value: object = lit[1:-1]
        else:
            value = float(lit)
        clauses.append((var, op, value))
    return clauses


def evaluate_predicate(text: str, frame: pd.DataFrame) -> np.ndarray:
    """Boolean mask over frame rows; unknown variables raise SchemaError."""
    mask = np.ones(len(frame), dtype=bool)
    for var, op, value in parse_predicate(text):
        if var not in frame.columns:
            raise SchemaError(f"condition references unknown variable '{var}'")
        col = frame[var]
        if isinstance(value, str):
            col = col.astype(str)
        else:
            col = pd.to_numeric(col, errors="coerce")
        mask &= np.asarray(_OPS[op](col, value))
    return mask
