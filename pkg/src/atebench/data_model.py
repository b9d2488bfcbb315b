"""Loading and preprocessing of tabular study data.

Rows with a missing treatment or outcome are dropped.  Remaining covariate
gaps are imputed (median for continuous columns, mode otherwise) and flagged
with a ``<name>_missing`` indicator column.  Categorical covariates are
indicator-encoded with the most frequent level as reference.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

KINDS = ("continuous", "categorical", "binary")
ROLES = ("covariate", "treatment", "outcome")
DEFAULT_MISSING = frozenset({"", "NA"})


class SchemaError(ValueError):
    """Column declarations and file contents disagree."""


class DataFormatError(ValueError):
    """A cell cannot be parsed as its declared kind."""


class EmptyDatasetError(ValueError):
    pass


class TreatmentMappingError(ValueError):
    pass


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str = "continuous"
    role: str = "covariate"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in ROLES:
            raise SchemaError(f"column {self.name!r}: unknown role {self.role!r}")


def validate_specs(specs: Sequence[ColumnSpec]) -> None:
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        dup = [k for k, c in Counter(names).items() if c > 1]
        raise SchemaError(f"duplicate column names: {dup}")
    for role in ("treatment", "outcome"):
        count = sum(s.role == role for s in specs)
        if count != 1:
            raise SchemaError(f"exactly one {role} column required, got {count}")


@dataclass
class RawTable:
    """Parsed rows; ``None`` marks a missing cell.

    Continuous cells are floats, every other cell keeps its raw string.
    """

    columns: list[str]
    rows: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]


@dataclass(frozen=True)
class AnalysisDataset:
    W: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    column_names: tuple[str, ...]

    def __post_init__(self):
        W = np.asarray(self.W, dtype=float)
        if W.ndim == 1:
            W = W.reshape(-1, 1)
        A = np.asarray(self.A)
        Y = np.asarray(self.Y, dtype=float)
        n = len(Y)
        if n < 1:
            raise EmptyDatasetError("dataset has no rows")
        if W.shape[0] != n or A.shape != (n,):
            raise ValueError("W, A and Y must have the same number of rows")
        if not np.all((A == 0) | (A == 1)):
            raise ValueError("treatment must be binary 0/1")
        if W.shape[1] != len(self.column_names):
            raise ValueError("column_names does not match W")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(Y))):
            raise ValueError("dataset contains missing or non-finite values")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "A", A.astype(np.int64))
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "column_names", tuple(self.column_names))

    @property
    def n(self) -> int:
        return len(self.Y)

    @property
    def p(self) -> int:
        return self.W.shape[1]

    def drop_columns(self, names: Sequence[str]) -> "AnalysisDataset":
        keep = [i for i, c in enumerate(self.column_names) if c not in set(names)]
        return AnalysisDataset(
            self.W[:, keep], self.A, self.Y, [self.column_names[i] for i in keep]
        )


def load_csv(
    path: str | Path,
    specs: Sequence[ColumnSpec],
    missing: frozenset[str] | set[str] = DEFAULT_MISSING,
) -> RawTable:
    validate_specs(specs)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: file is empty, header row required") from None
        absent = [s.name for s in specs if s.name not in header]
        if absent:
            raise SchemaError(f"{path}: declared columns missing from header: {absent}")
        index = {name: header.index(name) for name in (s.name for s in specs)}
        rows = []
        for lineno, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(header):
                raise DataFormatError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(record)}"
                )
            row = {}
            for spec in specs:
                cell = record[index[spec.name]].strip()
                if cell in missing:
                    row[spec.name] = None
                elif spec.kind == "continuous":
                    try:
                        row[spec.name] = float(cell)
                    except ValueError:
                        raise DataFormatError(
                            f"{path}:{lineno}: column {spec.name!r}: "
                            f"cannot parse {cell!r} as a number"
                        ) from None
                else:
                    row[spec.name] = cell
            rows.append(row)
    return RawTable(columns=[s.name for s in specs], rows=rows)


def _mode(values: list) -> object:
    counts = Counter(values)
    top = max(counts.values())
    # ties: lexicographically smallest level
    return min((v for v, c in counts.items() if c == top), key=str)


def impute_column(values: Sequence, kind: str) -> tuple[list, list[int]]:
    """Fill gaps in one covariate column and return ``(filled, indicator)``."""
    observed = [v for v in values if v is not None]
    if kind == "continuous":
        fill = float(np.median(observed)) if observed else 0.0
    else:
        fill = _mode(observed) if observed else "0"
    filled = [fill if v is None else v for v in values]
    return filled, [int(v is None) for v in values]


def _lookup_treatment(level, treatment_map: Mapping) -> int:
    if level in treatment_map:
        return int(treatment_map[level])
    key = str(level)
    if key in treatment_map:
        return int(treatment_map[key])
    try:
        x = float(level)
    except (TypeError, ValueError):
        x = None
    if x is not None:
        for k, v in treatment_map.items():
            try:
                if float(k) == x:
                    return int(v)
            except (TypeError, ValueError):
                continue
    raise TreatmentMappingError(f"treatment level {level!r} not in treatment map")


def _encode_levels(name: str, values: list) -> tuple[np.ndarray, list[str]]:
    levels = sorted(set(values), key=str)
    try:
        numeric = sorted({float(v) for v in levels})
    except ValueError:
        numeric = None
    if numeric is not None and set(numeric) <= {0.0, 1.0}:
        return np.array([[float(v)] for v in values]), [name]
    counts = Counter(values)
    top = max(counts.values())
    reference = min((v for v, c in counts.items() if c == top), key=str)
    others = [lv for lv in levels if lv != reference]
    cols = np.array([[float(v == lv) for lv in others] for v in values])
    cols = cols.reshape(len(values), len(others))
    return cols, [f"{name}={lv}" for lv in others]


def preprocess(
    table: RawTable,
    specs: Sequence[ColumnSpec],
    treatment_map: Mapping,
) -> AnalysisDataset:
    validate_specs(specs)
    if len(table) == 0:
        raise EmptyDatasetError("input table has no rows")
    treat = next(s for s in specs if s.role == "treatment")
    outcome = next(s for s in specs if s.role == "outcome")
    rows = [r for r in table.rows if r[treat.name] is not None and r[outcome.name] is not None]
    if not rows:
        raise EmptyDatasetError("every row has a missing treatment or outcome")

    A = np.array([_lookup_treatment(r[treat.name], treatment_map) for r in rows])
    try:
        Y = np.array([float(r[outcome.name]) for r in rows])
    except ValueError as exc:
        raise DataFormatError(f"outcome column {outcome.name!r}: {exc}") from None

    blocks, names, indicators, indicator_names = [], [], [], []
    for spec in specs:
        if spec.role != "covariate":
            continue
        filled, gaps = impute_column([r[spec.name] for r in rows], spec.kind)
        if spec.kind == "continuous":
            blocks.append(np.array(filled, dtype=float).reshape(-1, 1))
            names.append(spec.name)
        else:
            cols, cnames = _encode_levels(spec.name, filled)
            blocks.append(cols)
            names.extend(cnames)
        if any(gaps):
            indicators.append(np.array(gaps, dtype=float).reshape(-1, 1))
            indicator_names.append(f"{spec.name}_missing")

    blocks.extend(indicators)
    names.extend(indicator_names)
    W = np.hstack(blocks) if blocks else np.zeros((len(rows), 0))
    return AnalysisDataset(W=W, A=A, Y=Y, column_names=names)
