"""Tabular container shared by the forge, the model, and the harness.

A :class:`Table` stores an ``(m, d)`` float matrix plus per-column metadata.
Categorical cells hold ordinal codes into the column vocabulary; missing
cells hold NaN and are mirrored by a boolean mask (the mask is authoritative,
the NaN is just the storage sentinel).

CSV convention: header row, empty string means missing, and the designated
target column is written under the name ``__target__``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

TARGET_COLUMN = "__target__"

NUMERIC = "numeric"
CATEGORICAL = "categorical"

# a numeric column needs more distinct values than this, otherwise it is
# treated as categorical
NUMERIC_DISTINCT_MIN = 10


@dataclass(frozen=True)
class Column:
    name: str
    kind: str
    vocab: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in (NUMERIC, CATEGORICAL):
            raise ValueError(f"unknown column kind {self.kind!r}")
        if self.kind == NUMERIC and self.vocab:
            raise ValueError("numeric columns carry no vocabulary")


@dataclass
class Table:
    columns: list[Column]
    values: np.ndarray
    missing: np.ndarray = field(default=None)  # type: ignore[assignment]
    target: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("values must be 2-D")
        if self.values.shape[1] != len(self.columns):
            raise ValueError(
                f"{self.values.shape[1]} value columns vs {len(self.columns)} metadata columns")
        if self.missing is None:
            self.missing = np.isnan(self.values)
        else:
            self.missing = np.asarray(self.missing, dtype=bool)
            if self.missing.shape != self.values.shape:
                raise ValueError("missing mask shape mismatch")
        self.values = self.values.copy()
        self.values[self.missing] = np.nan
        if self.target is not None and not (0 <= self.target < len(self.columns)):
            raise ValueError(f"target index {self.target} out of range")

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def kinds(self) -> list[str]:
        return [c.kind for c in self.columns]

    def feature_indices(self) -> list[int]:
        return [j for j in range(self.d) if j != self.target]

    def take_rows(self, idx) -> "Table":
        idx = np.asarray(idx)
        return Table(list(self.columns), self.values[idx], self.missing[idx], self.target)

    def take_columns(self, cols, target: int | None = None) -> "Table":
        """Column subset; ``target`` is the position of the target in ``cols``."""
        cols = list(cols)
        return Table([self.columns[j] for j in cols], self.values[:, cols],
                     self.missing[:, cols], target)

    def with_target(self, j: int | None) -> "Table":
        return Table(list(self.columns), self.values, self.missing, j)

    def copy(self) -> "Table":
        return Table(list(self.columns), self.values.copy(), self.missing.copy(), self.target)

    def cell_label(self, i: int, j: int) -> str:
        """Render cell (i, j) the way save_csv writes it."""
        if self.missing[i, j]:
            return ""
        col = self.columns[j]
        if col.kind == CATEGORICAL:
            code = int(round(self.values[i, j]))
            if not (0 <= code < len(col.vocab)):
                raise ValueError(f"cell ({i},{j}) code {code} outside vocabulary")
            return col.vocab[code]
        return repr(float(self.values[i, j]))


def _parse_cell(text: str) -> tuple[bool, float | None]:
    """(parses as a number, finite value or None).

    Non-finite literals like ``nan`` still count as numeric parses but carry
    no value; in a numeric column they are treated as missing cells.
    """
    try:
        v = float(text)
    except ValueError:
        return False, None
    return True, (v if math.isfinite(v) else None)


def load_csv(path) -> Table:
    """Read a CSV into a Table, inferring per-column kinds.

    A column is numeric when every non-missing entry parses as a finite
    number and the distinct parsed values exceed ``NUMERIC_DISTINCT_MIN``;
    anything else becomes categorical over its sorted distinct labels.
    Empty strings (and non-finite numerics) count as missing.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = [row for row in reader]
    d = len(header)
    for i, row in enumerate(rows):
        if len(row) != d:
            raise ValueError(f"{path}: row {i + 2} has {len(row)} cells, header has {d}")
    m = len(rows)
    values = np.full((m, d), np.nan)
    missing = np.zeros((m, d), dtype=bool)
    columns: list[Column] = []
    for j, name in enumerate(header):
        cells = [row[j] for row in rows]
        parsed = [(_parse_cell(c) if c != "" else (True, None)) for c in cells]
        all_numeric = all(ok for ok, _ in parsed)
        distinct = {v for _, v in parsed if v is not None}
        if all_numeric and (len(distinct) > NUMERIC_DISTINCT_MIN or not distinct):
            columns.append(Column(name, NUMERIC))
            for i, (_, v) in enumerate(parsed):
                if v is None:
                    missing[i, j] = True
                else:
                    values[i, j] = v
        else:
            labels = sorted({c for c in cells if c != ""})
            code = {lab: k for k, lab in enumerate(labels)}
            columns.append(Column(name, CATEGORICAL, tuple(labels)))
            for i, c in enumerate(cells):
                if c == "":
                    missing[i, j] = True
                else:
                    values[i, j] = code[c]
    target = header.index(TARGET_COLUMN) if TARGET_COLUMN in header else None
    return Table(columns, values, missing, target)


def save_csv(table: Table, path) -> None:
    """Write a Table to CSV; the target column (if any) is named ``__target__``.

    Numeric cells use shortest round-trip float formatting, so saving the
    same table twice yields identical bytes.
    """
    header = [c.name for c in table.columns]
    if table.target is not None:
        header[table.target] = TARGET_COLUMN
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(table.m):
            writer.writerow([table.cell_label(i, j) for j in range(table.d)])


def column_stats(table: Table, context_rows=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean and std over observed cells of the given rows
    (all rows when None).  Degenerate columns get std 1 so z-scores stay finite."""
    rows = slice(None) if context_rows is None else np.asarray(context_rows)
    vals = table.values[rows]
    miss = table.missing[rows]
    mean = np.zeros(table.d)
    std = np.ones(table.d)
    for j in range(table.d):
        col = vals[~miss[:, j], j]
        if col.size:
            mean[j] = col.mean()
            s = col.std()
            std[j] = s if s > 0 else 1.0
    return mean, std
