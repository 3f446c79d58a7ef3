"""CSV ingestion with typed columns, row filters, and drop accounting."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

__all__ = ["DataError", "IngestResult", "ingest", "emit_csv", "apply_filter", "drop_missing"]


class DataError(ValueError):
    pass


_FILTER_RE = re.compile(
    r"^\s*(\w+)\s*(<=|>=|==|!=|<|>)\s*(-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)\s*$"
)

_OPS = {
    "<": np.less,
    "<=": np.less_equal,
    ">": np.greater,
    ">=": np.greater_equal,
    "==": np.equal,
    "!=": np.not_equal,
}


@dataclass
class IngestResult:
    data: pd.DataFrame
    n_read: int
    filter_drops: dict[str, int] = field(default_factory=dict)
    missing_drops: int = 0

    def accounting(self) -> dict:
        return {
            "rows_read": self.n_read,
            "filter_drops": dict(self.filter_drops),
            "missing_drops": self.missing_drops,
            "rows_used": int(len(self.data)),
        }


def _convert_column(values: pd.Series, col: str, kind: str):
    if kind == "categorical":
        out = values.map(lambda v: np.nan if v == "" else v)
        return out
    numeric = pd.to_numeric(values.replace("", np.nan), errors="coerce")
    bad = values.ne("") & numeric.isna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(
            f"cannot parse '{values.iloc[row]}' as {kind} (row {row}, column '{col}')"
        )
    if kind == "count":
        present = numeric.dropna()
        fractional = present[present != np.floor(present)]
        if len(fractional):
            row = int(fractional.index[0])
            raise DataError(
                f"non-integer value {fractional.iloc[0]} in count column '{col}' (row {row})"
            )
    return numeric.astype(float)


def ingest(path, schema: dict[str, str], filters: list[str] | None = None) -> IngestResult:
    """Read a CSV, type the scheduled columns, and apply row filters.

    Columns absent from the file are an error; columns in the file but not
    in the schema pass through untouched as strings.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    n_read = len(frame)
    missing_cols = sorted(set(schema) - set(frame.columns))
    if missing_cols:
        raise DataError(f"schema columns not present in {path.name}: {missing_cols}")
    for col, kind in schema.items():
        frame[col] = _convert_column(frame[col], col, kind)

    drops: dict[str, int] = {}
    for expr in filters or []:
        frame, n_dropped = apply_filter(frame, expr)
        drops[expr] = n_dropped
    return IngestResult(data=frame.reset_index(drop=True), n_read=n_read,
                        filter_drops=drops)


def apply_filter(frame: pd.DataFrame, expr: str) -> tuple[pd.DataFrame, int]:
    """Apply one `column op number` filter; returns (kept frame, dropped count)."""
    m = _FILTER_RE.match(expr)
    if not m:
        raise DataError(f"cannot parse filter '{expr}' (expected 'column op number')")
    col, op, value = m.group(1), m.group(2), float(m.group(3))
    if col not in frame.columns:
        raise DataError(f"filter references unknown column '{col}'")
    column = np.asarray(frame[col], dtype=float)
    keep = _OPS[op](column, value)
    keep &= ~np.isnan(column)
    return frame.loc[keep].reset_index(drop=True), int(len(frame) - keep.sum())


def drop_missing(frame: pd.DataFrame, columns) -> tuple[pd.DataFrame, int]:
    """Drop rows with a missing value in any of ``columns``."""
    present = [c for c in columns if c in frame.columns]
    mask = np.ones(len(frame), dtype=bool)
    for col in present:
        values = frame[col]
        if values.dtype == object:
            mask &= ~values.isna().to_numpy()
        else:
            mask &= np.isfinite(np.asarray(values, dtype=float))
    return frame.loc[mask].reset_index(drop=True), int(len(frame) - mask.sum())


def emit_csv(frame: pd.DataFrame, path) -> None:
    frame.to_csv(path, index=False, lineterminator="\n")
