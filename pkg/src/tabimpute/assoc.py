"""Bivariate association statistics: Pearson r, chi-square and Cramer's V."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateError, LengthError, UnknownColumnError
from .tabular import MISSING_CODE, MixedTable

logger = logging.getLogger(__name__)

__all__ = [
    "ContingencyTable",
    "ChiSquare",
    "AssociationRow",
    "AssociationReport",
    "pearson",
    "crosstab",
    "chi_square",
    "cramers_v",
    "gamma_q",
    "association_report",
    "write_report_csv",
]

GAMMA_EPS = 1e-12
GAMMA_MAX_ITER = 500
UNDERFLOW = 1e-300


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Product-moment correlation over complete pairs (NaN marks missing)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthError(f"length mismatch: {x.shape} vs {y.shape}")
    keep = ~(np.isnan(x) | np.isnan(y))
    x, y = x[keep], y[keep]
    if x.size < 2:
        raise LengthError("need at least two complete pairs")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateError("zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


@dataclass(frozen=True)
class ContingencyTable:
    row_levels: tuple[str, ...]
    col_levels: tuple[str, ...]
    counts: np.ndarray

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_counts(cls, counts) -> ContingencyTable:
        counts = np.asarray(counts, dtype=np.int64)
        return cls(tuple(str(i) for i in range(counts.shape[0])),
                   tuple(str(j) for j in range(counts.shape[1])), counts)


def crosstab(
    a: Sequence[str | None],
    b: Sequence[str | None],
    a_levels: Sequence[str] | None = None,
    b_levels: Sequence[str] | None = None,
) -> ContingencyTable:
    """Count co-occurrences over complete pairs.

    Levels keep the given order (sorted labels by default); levels with no
    surviving observation are dropped.
    """
    if len(a) != len(b):
        raise LengthError(f"length mismatch: {len(a)} vs {len(b)}")
    pairs = [(u, v) for u, v in zip(a, b) if u is not None and v is not None]
    a_levels = list(a_levels) if a_levels is not None else sorted({u for u, _ in pairs})
    b_levels = list(b_levels) if b_levels is not None else sorted({v for _, v in pairs})
    ai = {lv: i for i, lv in enumerate(a_levels)}
    bi = {lv: i for i, lv in enumerate(b_levels)}
    counts = np.zeros((len(a_levels), len(b_levels)), dtype=np.int64)
    for u, v in pairs:
        counts[ai[u], bi[v]] += 1
    rows = counts.sum(axis=1) > 0
    cols = counts.sum(axis=0) > 0
    if rows.sum() < 2 or cols.sum() < 2:
        raise DegenerateError("fewer than two levels observed in one of the variables")
    return ContingencyTable(tuple(lv for lv, k in zip(a_levels, rows) if k),
                            tuple(lv for lv, k in zip(b_levels, cols) if k),
                            counts[np.ix_(rows, cols)])


def _gamma_p_series(a: float, x: float, log_front: float) -> float:
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(GAMMA_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * GAMMA_EPS:
            break
    return total * math.exp(log_front)


def _gamma_q_contfrac(a: float, x: float, log_front: float) -> float:
    # modified Lentz evaluation
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, GAMMA_MAX_ITER + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < GAMMA_EPS:
            break
    return math.exp(log_front) * h


def gamma_q(a: float, x: float) -> float:
    """Upper regularized incomplete gamma function Q(a, x)."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x <= 0:
        return 1.0
    log_front = -x + a * math.log(x) - math.lgamma(a)
    if x < a + 1.0:
        return max(0.0, 1.0 - _gamma_p_series(a, x, log_front))
    return _gamma_q_contfrac(a, x, log_front)


class ChiSquare(NamedTuple):
    statistic: float
    dof: int
    p_value: float

    @property
    def underflow(self) -> bool:
        """True when the p-value fell below the representable floor and was set to 0."""
        return self.p_value == 0.0


def _check_margins(t: ContingencyTable) -> tuple[np.ndarray, np.ndarray, int]:
    counts = np.asarray(t.counts, dtype=np.float64)
    rows, cols = counts.sum(axis=1), counts.sum(axis=0)
    if (rows <= 0).any() or (cols <= 0).any():
        raise DegenerateError("contingency table has an empty row or column")
    if counts.shape[0] < 2 or counts.shape[1] < 2:
        raise DegenerateError("contingency table needs at least 2 rows and 2 columns")
    return rows, cols, t.n


def _statistic(t: ContingencyTable) -> float:
    rows, cols, n = _check_margins(t)
    counts = np.asarray(t.counts, dtype=np.float64)
    # n * (sum O^2 / (row * col) - 1) equals sum (O - E)^2 / E and is exact for
    # functional (one nonzero per row) tables
    ratio = float(np.sum(counts * counts / np.outer(rows, cols)))
    return max(0.0, n * (ratio - 1.0))


def chi_square(t: ContingencyTable) -> ChiSquare:
    """Pearson chi-square test of independence, no continuity correction."""
    stat = _statistic(t)
    dof = (t.counts.shape[0] - 1) * (t.counts.shape[1] - 1)
    p = gamma_q(dof / 2.0, stat / 2.0)
    if p < UNDERFLOW:
        p = 0.0
    return ChiSquare(stat, dof, min(1.0, p))


def cramers_v(t: ContingencyTable) -> float:
    stat = _statistic(t)
    k = min(t.counts.shape) - 1
    return min(1.0, math.sqrt(stat / (t.n * k)))


@dataclass(frozen=True)
class AssociationRow:
    other_column: str
    statistic_kind: str  # "pearson_r" or "cramers_v"
    value: float
    chi_sq: float | None = None
    dof: int | None = None
    p_value: float | None = None
    ordinal_coded: bool = False


@dataclass
class AssociationReport:
    anchor: str
    rows: list[AssociationRow] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)


def _numeric(table: MixedTable, name: str) -> np.ndarray:
    col = table.column_schema(name)
    arr = table.column(name)
    if col.is_categorical:
        return np.where(arr == MISSING_CODE, np.nan, arr.astype(np.float64))
    return arr


def association_report(table: MixedTable, anchor: str) -> AssociationReport:
    """Associate every other column with ``anchor``.

    Continuous pairs get Pearson r; categorical pairs get Cramer's V and a
    chi-square test; mixed pairs get Pearson r on the categorical side's level
    index, flagged ``ordinal_coded``. Rows are sorted by decreasing |value|,
    then by column name. Degenerate pairs (zero variance, a single level) are
    listed in ``skipped``.
    """
    names = table.names
    if anchor not in names:
        raise UnknownColumnError(f"unknown anchor column {anchor!r}")
    a_col = table.column_schema(anchor)
    report = AssociationReport(anchor)
    for name in names:
        if name == anchor:
            continue
        o_col = table.column_schema(name)
        try:
            if a_col.is_categorical and o_col.is_categorical:
                t = crosstab(table.labels(anchor), table.labels(name), a_col.levels, o_col.levels)
                chi = chi_square(t)
                row = AssociationRow(name, "cramers_v", cramers_v(t), chi.statistic, chi.dof, chi.p_value)
            else:
                r = pearson(_numeric(table, anchor), _numeric(table, name))
                row = AssociationRow(name, "pearson_r", r,
                                     ordinal_coded=a_col.is_categorical or o_col.is_categorical)
        except (DegenerateError, LengthError) as exc:
            logger.warning("skipping %s: %s", name, exc)
            report.skipped.append((name, str(exc)))
            continue
        report.rows.append(row)
    report.rows.sort(key=lambda r: (-abs(r.value), r.other_column))
    return report


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report_csv(report: AssociationReport, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["other_column", "statistic_kind", "value", "chi_sq", "dof", "p_value", "ordinal_coded"])
        for r in report.rows:
            w.writerow([r.other_column, r.statistic_kind, _fmt(r.value), _fmt(r.chi_sq),
                        _fmt(r.dof), _fmt(r.p_value), _fmt(r.ordinal_coded)])
