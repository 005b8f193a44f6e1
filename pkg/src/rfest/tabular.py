"""Typed reservoir tables: CSV ingestion, target encoding, folds, scaling, filters.

Numeric columns are float arrays with NaN for missing cells; categorical
columns are object arrays with ``None`` for missing cells. Targets are
recovery factors in percent.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NUMERIC = "numeric"
CATEGORICAL = "categorical"
FEATURE = "feature"
TARGET = "target"
META = "meta"

DEFAULT_MISSING = frozenset({"", "NA"})


class DataError(ValueError):
    """Malformed input data; the message names the offending row/column."""


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str = NUMERIC
    role: str = FEATURE
    unit_note: str = ""

    def __post_init__(self):
        if self.kind not in (NUMERIC, CATEGORICAL):
            raise ValueError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in (FEATURE, TARGET, META):
            raise ValueError(f"column {self.name!r}: unknown role {self.role!r}")

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "role": self.role,
                "unit_note": self.unit_note}


def check_schema(schema: Sequence[ColumnSchema]) -> tuple[ColumnSchema, ...]:
    schema = tuple(schema)
    seen = set()
    for col in schema:
        if col.name in seen:
            raise DataError(f"duplicate column name {col.name!r}")
        seen.add(col.name)
    return schema


def load_schema(path) -> tuple[ColumnSchema, ...]:
    """Read a schema file: ``{"columns": [{"name", "kind", "role", "unit_note"}, ...]}``."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return check_schema(ColumnSchema(**col) for col in data["columns"])


def dump_schema(schema: Sequence[ColumnSchema], path) -> None:
    Path(path).write_text(
        json.dumps({"columns": [c.to_dict() for c in schema]}, indent=2) + "\n",
        encoding="utf-8")


def schema_hash(schema: Sequence[ColumnSchema]) -> str:
    """Hash of the modeling-relevant schema (feature/target names and kinds)."""
    key = [[c.name, c.kind, c.role] for c in schema if c.role != META]
    return hashlib.sha256(json.dumps(key).encode()).hexdigest()[:16]


def _empty_column(kind: str, n: int) -> np.ndarray:
    if kind == NUMERIC:
        return np.full(n, np.nan)
    return np.full(n, None, dtype=object)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=arr.dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    schema: tuple[ColumnSchema, ...]
    columns: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        schema = check_schema(self.schema)
        object.__setattr__(self, "schema", schema)
        lengths = {len(self.columns[c.name]) for c in schema}
        if len(lengths) > 1:
            raise DataError(f"columns have different lengths: {sorted(lengths)}")
        cols = {}
        for c in schema:
            values = self.columns[c.name]
            if c.kind == NUMERIC:
                values = np.asarray(values, dtype=float)
            else:
                values = np.asarray(
                    [None if v is None or (isinstance(v, float) and math.isnan(v)) else str(v)
                     for v in values], dtype=object)
            cols[c.name] = _freeze(values)
        object.__setattr__(self, "columns", cols)
        targets = [c for c in schema if c.role == TARGET]
        if len(targets) > 1:
            raise DataError("more than one target column: " + ", ".join(c.name for c in targets))
        for c in targets:
            y = cols[c.name]
            bad = ~np.isnan(y) & ((y < 0) | (y > 100))
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise DataError(f"row {i + 1}, column {c.name!r}: target {y[i]} outside [0, 100]")

    @classmethod
    def from_columns(cls, schema: Sequence[ColumnSchema], columns: dict) -> Dataset:
        return cls(tuple(schema), dict(columns))

    @classmethod
    def empty(cls, schema: Sequence[ColumnSchema]) -> Dataset:
        return cls(tuple(schema), {c.name: _empty_column(c.kind, 0) for c in schema})

    @property
    def n(self) -> int:
        if not self.schema:
            return 0
        return len(self.columns[self.schema[0].name])

    def __len__(self) -> int:
        return self.n

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.schema]

    def spec(self, name: str) -> ColumnSchema:
        for c in self.schema:
            if c.name == name:
                return c
        raise KeyError(f"column {name!r} not in dataset")

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    def __getitem__(self, name: str) -> np.ndarray:
        if name not in self.columns:
            raise KeyError(f"column {name!r} not in dataset")
        return self.columns[name]

    @property
    def target_name(self) -> str:
        for c in self.schema:
            if c.role == TARGET:
                return c.name
        raise DataError("dataset has no target column")

    @property
    def y(self) -> np.ndarray:
        return self.columns[self.target_name]

    @property
    def feature_names(self) -> list[str]:
        return [c.name for c in self.schema if c.role == FEATURE]

    def missing_mask(self, name: str) -> np.ndarray:
        col = self[name]
        if self.spec(name).kind == NUMERIC:
            return np.isnan(col)
        return np.array([v is None for v in col], dtype=bool)

    def missing_fraction(self, name: str) -> float:
        return float(self.missing_mask(name).mean()) if self.n else 0.0

    def take(self, rows) -> Dataset:
        rows = np.asarray(rows)
        if rows.size == 0:
            rows = rows.astype(np.intp)
        return Dataset(self.schema, {k: v[rows] for k, v in self.columns.items()})

    def with_column(self, column: ColumnSchema, values) -> Dataset:
        """Append ``column`` or replace the column of the same name."""
        schema = [column if c.name == column.name else c for c in self.schema]
        if column.name not in self.columns:
            schema.append(column)
        cols = dict(self.columns)
        cols[column.name] = values
        return Dataset(tuple(schema), cols)

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        for name in names:
            if self.spec(name).kind != NUMERIC:
                raise DataError(f"column {name!r} is categorical; encode it first")
        if not names:
            return np.empty((self.n, 0))
        return np.column_stack([self[name] for name in names]).astype(float)

    def rows(self) -> Iterable[list]:
        for i in range(self.n):
            yield [self.columns[c.name][i] for c in self.schema]


def _format_cell(value, kind: str) -> str:
    if kind == NUMERIC:
        return "" if np.isnan(value) else repr(float(value))
    return "" if value is None else str(value)


def write_csv(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ds.names)
        kinds = [c.kind for c in ds.schema]
        for row in ds.rows():
            writer.writerow([_format_cell(v, k) for v, k in zip(row, kinds)])


def load_csv(path, schema: Sequence[ColumnSchema],
             missing_markers: Iterable[str] = DEFAULT_MISSING) -> Dataset:
    """Read a comma-separated file whose header lists exactly the schema's columns."""
    schema = check_schema(schema)
    markers = frozenset(missing_markers)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        dupes = sorted({h for h in header if header.count(h) > 1})
        if dupes:
            raise DataError(f"{path}: duplicate column names in header: {', '.join(dupes)}")
        expected = [c.name for c in schema]
        if set(header) != set(expected):
            missing = [n for n in expected if n not in header]
            extra = [h for h in header if h not in expected]
            raise DataError(f"{path}: header does not match schema "
                            f"(missing: {missing}, unexpected: {extra})")
        pos = {name: header.index(name) for name in expected}
        raw = {name: [] for name in expected}
        for lineno, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
            for col in schema:
                cell = row[pos[col.name]]
                if cell in markers:
                    raw[col.name].append(np.nan if col.kind == NUMERIC else None)
                elif col.kind == NUMERIC:
                    try:
                        raw[col.name].append(float(cell))
                    except ValueError:
                        raise DataError(f"{path}: row {lineno}, column {col.name!r}: "
                                        f"cannot parse {cell!r} as a number") from None
                else:
                    raw[col.name].append(cell)
    cols = {c.name: np.array(raw[c.name], dtype=float if c.kind == NUMERIC else object)
            for c in schema}
    if not any(len(v) for v in cols.values()):
        return Dataset.empty(schema)
    return Dataset(schema, cols)


def drop_missing_target(ds: Dataset) -> tuple[Dataset, int]:
    keep = ~np.isnan(ds.y)
    return ds.take(np.flatnonzero(keep)), int((~keep).sum())


@dataclass(frozen=True)
class TargetEncoder:
    column: str
    mapping: dict[str, float]
    fallback: float

    def encode(self, values) -> np.ndarray:
        return np.array([np.nan if v is None else self.mapping.get(v, self.fallback)
                         for v in values], dtype=float)

    def to_dict(self) -> dict:
        return {"column": self.column, "mapping": dict(sorted(self.mapping.items())),
                "fallback": self.fallback}

    @classmethod
    def from_dict(cls, data: dict) -> TargetEncoder:
        return cls(data["column"], {k: float(v) for k, v in data["mapping"].items()},
                   float(data["fallback"]))


def fit_target_encoder(train: Dataset, column: str) -> TargetEncoder:
    """Per-category mean target; the overall mean covers unseen categories."""
    if train.spec(column).kind != CATEGORICAL:
        raise DataError(f"column {column!r} is not categorical")
    y = train.y
    labeled = ~np.isnan(y)
    if not labeled.any():
        raise DataError(f"cannot fit target encoder for {column!r}: no rows with a target")
    groups: dict[str, list[float]] = {}
    for cat, target in zip(train[column][labeled], y[labeled]):
        if cat is not None:
            groups.setdefault(cat, []).append(float(target))
    # fsum keeps the means independent of row order
    mapping = {cat: math.fsum(v) / len(v) for cat, v in sorted(groups.items())}
    fallback = math.fsum(y[labeled].tolist()) / int(labeled.sum())
    return TargetEncoder(column, mapping, fallback)


def apply_target_encoder(ds: Dataset, enc: TargetEncoder) -> Dataset:
    if enc.column not in ds:
        raise DataError(f"column {enc.column!r} not in dataset")
    old = ds.spec(enc.column)
    if old.kind == NUMERIC:
        raise DataError(f"column {enc.column!r} is already numeric")
    new = ColumnSchema(old.name, NUMERIC, old.role, old.unit_note)
    return ds.with_column(new, enc.encode(ds[enc.column]))


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: np.ndarray
    seed: int
    loo: bool = False

    @property
    def n(self) -> int:
        return len(self.assignment)

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)

    def splits(self):
        for fold in range(self.k):
            yield fold, self.train_indices(fold), self.test_indices(fold)

    def describe(self) -> dict:
        return {"k": self.k, "loo": self.loo, "seed": self.seed, "n": self.n}


def make_folds(n: int, k: int | str, seed: int = 0) -> FoldPlan:
    """Shuffled K-fold partition, or leave-one-out when ``k == "loo"``."""
    if k == "loo":
        if n < 2:
            raise ValueError(f"leave-one-out needs at least 2 rows, got {n}")
        return FoldPlan(n, np.arange(n), seed, loo=True)
    k = int(k)
    if not 2 <= k <= n:
        raise ValueError(f"fold count must satisfy 2 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[perm] = np.arange(n) % k
    return FoldPlan(k, assignment, seed)


@dataclass(frozen=True)
class Scaler:
    """Per-column (median, mean, std); medians fill missing cells before scaling."""

    params: dict[str, tuple[float, float, float]]

    def transform(self, ds: Dataset) -> Dataset:
        for name, (median, mean, std) in self.params.items():
            col = np.where(np.isnan(ds[name]), median, ds[name])
            ds = ds.with_column(ds.spec(name), (col - mean) / std)
        return ds

    def inverse(self, ds: Dataset) -> Dataset:
        for name, (_, mean, std) in self.params.items():
            ds = ds.with_column(ds.spec(name), ds[name] * std + mean)
        return ds


def standardize(ds: Dataset, columns: Sequence[str]) -> tuple[Dataset, Scaler]:
    """Median-impute then z-score (population std) the given numeric columns."""
    params = {}
    for name in columns:
        if ds.spec(name).kind != NUMERIC:
            raise DataError(f"column {name!r} is not numeric")
        col = ds[name]
        observed = col[~np.isnan(col)]
        if len(observed) < 2 or np.ptp(observed) == 0:
            raise DataError(f"column {name!r} has zero variance; cannot standardize")
        median = float(np.median(observed))
        filled = np.where(np.isnan(col), median, col)
        params[name] = (median, float(filled.mean()), float(filled.std()))
    scaler = Scaler(params)
    return scaler.transform(ds), scaler


def filter_rows(ds: Dataset, column: str, threshold: float) -> Dataset:
    """Rows with ``column >= threshold`` and a known target."""
    if column not in ds:
        raise DataError(f"column {column!r} not in dataset")
    if ds.spec(column).kind != NUMERIC:
        raise DataError(f"column {column!r} is not numeric")
    keep = (ds[column] >= threshold) & ~np.isnan(ds.y)
    return ds.take(np.flatnonzero(keep))


def max_missing_rows(ds: Dataset, columns: Sequence[str], max_missing: int = 1) -> Dataset:
    """Rows missing at most ``max_missing`` of ``columns``."""
    if not columns:
        return ds
    counts = np.sum([ds.missing_mask(c) for c in columns], axis=0)
    return ds.take(np.flatnonzero(counts <= max_missing))
