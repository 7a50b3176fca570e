"""Mixed-type tables: schema, CSV ingestion, and the encode/decode transforms.

A :class:`MixedTable` stores one numpy array per column. Continuous columns
are ``float64`` with ``NaN`` marking a missing cell; categorical columns are
``int64`` level codes with ``-1`` marking a missing cell. Level labels live in
the column's :class:`ColumnSchema`.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateColumnError,
    HeaderMismatchError,
    ParseError,
    SchemaError,
    ShapeMismatchError,
    UnknownColumnError,
    UnknownLevelError,
)

__all__ = [
    "Kind",
    "Role",
    "ColumnSchema",
    "MixedTable",
    "EncodedMatrix",
    "MISSING_CODE",
    "load_schema",
    "save_schema",
    "schema_from_dict",
    "schema_to_dict",
    "load_csv",
    "write_csv",
    "encode",
    "decode",
]

MISSING_CODE = -1


class Kind(str, Enum):
    CONTINUOUS = "continuous"
    CATEGORICAL = "categorical"


class Role(str, Enum):
    FEATURE = "feature"
    TARGET = "target"
    GROUP_KEY = "group_key"


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: Kind
    levels: tuple[str, ...] = ()
    role: Role = Role.FEATURE

    @classmethod
    def continuous(cls, name: str, role: Role = Role.FEATURE) -> ColumnSchema:
        return cls(name, Kind.CONTINUOUS, (), Role(role))

    @classmethod
    def categorical(
        cls, name: str, levels: Sequence[str], role: Role = Role.FEATURE
    ) -> ColumnSchema:
        return cls(name, Kind.CATEGORICAL, tuple(levels), Role(role))

    @property
    def is_categorical(self) -> bool:
        return self.kind is Kind.CATEGORICAL

    @property
    def width(self) -> int:
        """Number of encoded columns this column occupies."""
        return len(self.levels) if self.is_categorical else 1


def validate_schema(columns: Sequence[ColumnSchema]) -> list[ColumnSchema]:
    """Check the schema invariants and return the columns as a list."""
    seen: set[str] = set()
    n_target = n_group = 0
    for col in columns:
        if not isinstance(col.name, str) or not col.name:
            raise SchemaError("column name must be a non-empty string")
        if col.name in seen:
            raise SchemaError(f"duplicate column name {col.name!r}")
        seen.add(col.name)
        if col.is_categorical:
            if not col.levels:
                raise SchemaError(f"column {col.name!r}: empty level list")
            if len(set(col.levels)) != len(col.levels):
                dup = next(lv for lv in col.levels if col.levels.count(lv) > 1)
                raise SchemaError(f"column {col.name!r}: duplicate level {dup!r}")
            if any(not isinstance(lv, str) for lv in col.levels):
                raise SchemaError(f"column {col.name!r}: levels must be strings")
        elif col.levels:
            raise SchemaError(f"column {col.name!r}: continuous column has levels")
        n_target += col.role is Role.TARGET
        n_group += col.role is Role.GROUP_KEY
    if n_target > 1:
        raise SchemaError("role: more than one target column")
    if n_group > 1:
        raise SchemaError("role: more than one group_key column")
    return list(columns)


def schema_from_dict(obj: Any) -> list[ColumnSchema]:
    if not isinstance(obj, dict) or not isinstance(obj.get("columns"), list):
        raise ParseError('schema: expected an object with a "columns" list')
    out = []
    for i, entry in enumerate(obj["columns"]):
        if not isinstance(entry, dict):
            raise ParseError(f"columns[{i}]: expected an object")
        name = entry.get("name")
        if not isinstance(name, str):
            raise ParseError(f"columns[{i}].name: expected a string")
        kind = entry.get("kind")
        try:
            role = Role(entry.get("role", "feature"))
        except ValueError:
            raise ParseError(f"columns[{i}].role: unknown role {entry.get('role')!r}") from None
        if kind == "continuous":
            out.append(ColumnSchema.continuous(name, role))
        elif isinstance(kind, dict) and set(kind) == {"categorical"}:
            levels = kind["categorical"]
            if not isinstance(levels, list):
                raise ParseError(f"columns[{i}].kind.categorical: expected a list")
            out.append(ColumnSchema.categorical(name, [str(lv) for lv in levels], role))
        else:
            raise ParseError(f"columns[{i}].kind: expected \"continuous\" or {{\"categorical\": [...]}}")
    return validate_schema(out)


def schema_to_dict(schema: Sequence[ColumnSchema]) -> dict:
    cols = []
    for col in schema:
        kind: Any = {"categorical": list(col.levels)} if col.is_categorical else "continuous"
        cols.append({"name": col.name, "kind": kind, "role": col.role.value})
    return {"columns": cols}


def load_schema(path: str | Path) -> list[ColumnSchema]:
    """Read and validate a JSON schema file.

    Raises:
        ParseError: the file is missing or not valid schema JSON.
        SchemaError: the schema violates an invariant (duplicate names or
            levels, empty level list, more than one target/group key).
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"schema: cannot read {path}: {exc.strerror}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"schema: invalid JSON in {path}: {exc}") from exc
    return schema_from_dict(obj)


def save_schema(schema: Sequence[ColumnSchema], path: str | Path) -> None:
    Path(path).write_text(json.dumps(schema_to_dict(schema), indent=2) + "\n", encoding="utf-8")


class MixedTable:
    """Rectangular table of continuous, categorical and missing cells."""

    def __init__(self, schema: Sequence[ColumnSchema], columns: Sequence[np.ndarray]):
        schema = tuple(validate_schema(schema))
        if len(columns) != len(schema):
            raise ShapeMismatchError(f"{len(schema)} schema columns but {len(columns)} data columns")
        lengths = {len(c) for c in columns}
        if len(lengths) > 1:
            raise ShapeMismatchError(f"ragged columns: lengths {sorted(lengths)}")
        data = []
        for col, arr in zip(schema, columns):
            if col.is_categorical:
                a = np.array(arr, dtype=np.int64)
                bad = (a < MISSING_CODE) | (a >= len(col.levels))
                if bad.any():
                    raise UnknownLevelError(str(a[bad][0]), col.name)
            else:
                a = np.array(arr, dtype=np.float64)
                if np.isinf(a).any():
                    raise ParseError(f"column {col.name!r}: non-finite value")
            a.setflags(write=False)
            data.append(a)
        self.schema: tuple[ColumnSchema, ...] = schema
        self.columns: tuple[np.ndarray, ...] = tuple(data)
        self.n_rows = lengths.pop() if lengths else 0

    @classmethod
    def from_rows(cls, schema: Sequence[ColumnSchema], rows: Iterable[Sequence[Any]]) -> MixedTable:
        """Build a table from row tuples whose cells are None, numbers or labels."""
        schema = list(schema)
        rows = [list(r) for r in rows]
        for i, r in enumerate(rows):
            if len(r) != len(schema):
                raise ShapeMismatchError(f"row {i} has {len(r)} cells, expected {len(schema)}")
        cols = []
        for j, col in enumerate(schema):
            cells = [r[j] for r in rows]
            if col.is_categorical:
                index = {lv: k for k, lv in enumerate(col.levels)}
                codes = []
                for c in cells:
                    if c is None:
                        codes.append(MISSING_CODE)
                    elif c in index:
                        codes.append(index[c])
                    else:
                        raise UnknownLevelError(str(c), col.name)
                cols.append(np.array(codes, dtype=np.int64))
            else:
                cols.append(np.array([np.nan if c is None else float(c) for c in cells]))
        return cls(schema, cols)

    @property
    def n_cols(self) -> int:
        return len(self.schema)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.schema]

    def index(self, name: str) -> int:
        for j, col in enumerate(self.schema):
            if col.name == name:
                return j
        raise UnknownColumnError(f"unknown column {name!r}")

    def column(self, name: str) -> np.ndarray:
        return self.columns[self.index(name)]

    def column_schema(self, name: str) -> ColumnSchema:
        return self.schema[self.index(name)]

    def role_column(self, role: Role) -> str | None:
        for col in self.schema:
            if col.role is role:
                return col.name
        return None

    @property
    def target(self) -> str | None:
        return self.role_column(Role.TARGET)

    @property
    def group_key(self) -> str | None:
        return self.role_column(Role.GROUP_KEY)

    def missing(self) -> np.ndarray:
        """Boolean matrix (n_rows x n_cols), true where a cell is missing."""
        out = np.zeros((self.n_rows, self.n_cols), dtype=bool)
        for j, (col, arr) in enumerate(zip(self.schema, self.columns)):
            out[:, j] = arr == MISSING_CODE if col.is_categorical else np.isnan(arr)
        return out

    @property
    def n_missing(self) -> int:
        return int(self.missing().sum())

    def labels(self, name: str) -> list[str | None]:
        col = self.column_schema(name)
        if not col.is_categorical:
            raise SchemaError(f"column {name!r} is not categorical")
        return [None if c == MISSING_CODE else col.levels[c] for c in self.column(name)]

    def cell(self, i: int, j: int) -> float | str | None:
        col, v = self.schema[j], self.columns[j][i]
        if col.is_categorical:
            return None if v == MISSING_CODE else col.levels[v]
        return None if np.isnan(v) else float(v)

    def to_rows(self) -> list[list[float | str | None]]:
        return [[self.cell(i, j) for j in range(self.n_cols)] for i in range(self.n_rows)]

    def select(self, names: Sequence[str]) -> MixedTable:
        idx = [self.index(n) for n in names]
        return MixedTable([self.schema[j] for j in idx], [self.columns[j] for j in idx])

    def with_columns(self, updates: dict[str, np.ndarray]) -> MixedTable:
        cols = list(self.columns)
        for name, arr in updates.items():
            cols[self.index(name)] = arr
        return MixedTable(self.schema, cols)

    def take(self, rows: np.ndarray) -> MixedTable:
        return MixedTable(self.schema, [c[rows] for c in self.columns])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MixedTable):
            return NotImplemented
        if self.schema != other.schema or self.n_rows != other.n_rows:
            return False
        return all(np.array_equal(a, b, equal_nan=not col.is_categorical)
                   for col, a, b in zip(self.schema, self.columns, other.columns))

    def __repr__(self) -> str:
        return f"MixedTable({self.n_rows} rows x {self.n_cols} cols, {self.n_missing} missing)"


def load_csv(
    path: str | Path, schema: Sequence[ColumnSchema], missing_token: str = ""
) -> MixedTable:
    """Read a CSV file into a table whose column order follows the header.

    Cells equal to ``missing_token`` become missing. Header names must match
    the schema names as a set.
    """
    by_name = {c.name: c for c in schema}
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"data: cannot read {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise HeaderMismatchError(f"data: {path} is empty") from None
        except csv.Error as exc:
            raise ParseError(f"data: {exc}") from exc
        if len(set(header)) != len(header) or set(header) != set(by_name):
            missing = sorted(set(by_name) - set(header))
            extra = sorted(set(header) - set(by_name))
            raise HeaderMismatchError(
                f"header does not match schema (missing {missing}, unexpected {extra})"
            )
        ordered = [by_name[h] for h in header]
        rows = []
        try:
            for lineno, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                if len(rec) != len(header):
                    raise ParseError(f"line {lineno}: {len(rec)} fields, expected {len(header)}")
                rows.append(rec)
        except csv.Error as exc:
            raise ParseError(f"data: {exc}") from exc

    cols = []
    for j, col in enumerate(ordered):
        raw = [r[j] for r in rows]
        if col.is_categorical:
            index = {lv: k for k, lv in enumerate(col.levels)}
            codes = np.empty(len(raw), dtype=np.int64)
            for i, s in enumerate(raw):
                if s == missing_token:
                    codes[i] = MISSING_CODE
                elif s in index:
                    codes[i] = index[s]
                else:
                    raise UnknownLevelError(s, col.name)
            cols.append(codes)
        else:
            vals = np.empty(len(raw))
            for i, s in enumerate(raw):
                if s == missing_token:
                    vals[i] = np.nan
                    continue
                try:
                    v = float(s)
                except ValueError:
                    raise ParseError(f"column {col.name!r}, line {i + 2}: cannot parse {s!r} as a number") from None
                if not math.isfinite(v):
                    raise ParseError(f"column {col.name!r}, line {i + 2}: non-finite value {s!r}")
                vals[i] = v
            cols.append(vals)
    return MixedTable(ordered, cols)


def write_csv(table: MixedTable, path: str | Path, missing_token: str = "") -> None:
    """Write a table as CSV. Floats use shortest round-trip formatting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.names)
        for row in table.to_rows():
            w.writerow([missing_token if c is None else (repr(c) if isinstance(c, float) else c)
                        for c in row])


@dataclass(frozen=True)
class EncodedMatrix:
    """Dense numeric form of a table.

    ``blocks[j]`` is the half-open range of encoded columns owned by original
    column ``j``; ``norm_stats[j]`` is ``(mean, std)`` for continuous columns
    and ``None`` for categorical ones.
    """

    values: np.ndarray
    mask: np.ndarray
    blocks: tuple[tuple[int, int], ...]
    norm_stats: tuple[tuple[float, float] | None, ...]
    names: tuple[str, ...] = field(default=())

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def with_values(self, values: np.ndarray) -> EncodedMatrix:
        return EncodedMatrix(values, self.mask, self.blocks, self.norm_stats, self.names)


def _column_stats(observed: np.ndarray) -> tuple[float, float]:
    mean = float(np.mean(observed))
    std = float(np.std(observed, ddof=1)) if observed.size >= 2 else 0.0
    # zero variance or a single observation: keep the column as a constant offset
    if not std > 0.0:
        std = 1.0
    return mean, std


def encode(table: MixedTable) -> EncodedMatrix:
    """One-hot encode categoricals, z-score continuous columns, zero the gaps.

    Raises:
        DegenerateColumnError: a column has no observed cell.
    """
    n = table.n_rows
    blocks, stats = [], []
    parts_v, parts_m = [], []
    start = 0
    for col, arr in zip(table.schema, table.columns):
        if col.is_categorical:
            obs = arr != MISSING_CODE
            if not obs.any():
                raise DegenerateColumnError(f"column {col.name!r} has no observed values")
            block = np.zeros((n, len(col.levels)))
            block[np.flatnonzero(obs), arr[obs]] = 1.0
            parts_v.append(block)
            parts_m.append(np.repeat(obs[:, None], len(col.levels), axis=1))
            stats.append(None)
        else:
            obs = ~np.isnan(arr)
            if not obs.any():
                raise DegenerateColumnError(f"column {col.name!r} has no observed values")
            mean, std = _column_stats(arr[obs])
            z = np.where(obs, (arr - mean) / std, 0.0)
            parts_v.append(z[:, None])
            parts_m.append(obs[:, None])
            stats.append((mean, std))
        blocks.append((start, start + col.width))
        start += col.width
    values = np.hstack(parts_v) if parts_v else np.zeros((n, 0))
    mask = np.hstack(parts_m) if parts_m else np.zeros((n, 0), dtype=bool)
    return EncodedMatrix(values, mask, tuple(blocks), tuple(stats), tuple(table.names))


def decode(matrix: EncodedMatrix, original: MixedTable) -> MixedTable:
    """Map an encoded (imputed) matrix back to a table.

    Observed cells are copied from ``original``. Missing continuous cells are
    de-normalised; missing categorical cells take the level with the largest
    block entry, ties going to the lowest level index.
    """
    if len(matrix.blocks) != original.n_cols or matrix.values.shape[0] != original.n_rows:
        raise ShapeMismatchError("encoded matrix does not match the original table")
    cols = []
    for col, arr, (a, b), st in zip(original.schema, original.columns, matrix.blocks, matrix.norm_stats):
        if b - a != col.width or (st is None) != col.is_categorical:
            raise ShapeMismatchError(f"block for column {col.name!r} does not match its schema")
        block = matrix.values[:, a:b]
        if col.is_categorical:
            out = arr.copy()
            miss = out == MISSING_CODE
            out[miss] = np.argmax(block[miss], axis=1)
        else:
            mean, std = st
            out = arr.copy()
            miss = np.isnan(out)
            out[miss] = block[miss, 0] * std + mean
        cols.append(out)
    return MixedTable(original.schema, cols)
