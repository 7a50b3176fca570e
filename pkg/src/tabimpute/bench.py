"""Synthetic benchmark harness.

Generates low-rank mixed tables with a planted target, masks them, and compares
SVD imputation against median/mode imputation both on held-out imputation
error and on downstream boosted-tree cross-validation RMSE.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .completion import ImputeConfig, impute
from .errors import DegenerateColumnError, LengthError, MaskingError, RankError
from .gbt import GbtParams, cross_validate_predictions
from .tabular import MISSING_CODE, ColumnSchema, MixedTable, Role

logger = logging.getLogger(__name__)

__all__ = [
    "SyntheticSpec",
    "AGE_GROUP_LABELS",
    "PLANTED_WEIGHTS",
    "gen_low_rank",
    "gen_mixed_synthetic",
    "mask_random",
    "baseline_impute",
    "design_matrix",
    "imputation_quality",
    "stratified_rmse",
    "GroupRmse",
    "MetricRow",
    "GroupRow",
    "BenchmarkReport",
    "compare_strategies",
]

AGE_GROUP_LABELS = ("00-49", "50-59", "60-69", "70-79", "80+")
AGE_GROUP_EDGES = (50.0, 60.0, 70.0, 80.0)
# target = sum of these weights times the first three latent factors
PLANTED_WEIGHTS = (3.0, -2.0, 1.5)
# non-planted columns see the target-driving factors at this reduced loading
PLANTED_LEAKAGE = 0.3
ELAPSED_YEARS = (4.0, 9.0)


@dataclass(frozen=True)
class SyntheticSpec:
    n_rows: int = 200
    n_continuous: int = 8
    n_categorical: int = 4
    levels_per_cat: int = 3
    latent_rank: int = 3
    noise_sd: float = 0.1
    missing_fraction: float = 0.3
    seed: int = 0
    panel_mode: bool = False

    def __post_init__(self):
        if min(self.n_rows, self.latent_rank) < 1 or self.n_continuous < 0 or self.n_categorical < 0:
            raise ValueError("n_rows and latent_rank must be positive, column counts non-negative")
        if self.n_continuous + self.n_categorical < 1:
            raise ValueError("need at least one feature column")
        if self.levels_per_cat < 2:
            raise ValueError("levels_per_cat must be >= 2")
        if self.latent_rank > self.n_continuous + self.n_categorical:
            raise RankError("latent_rank exceeds the number of feature columns")
        if not self.noise_sd >= 0:
            raise ValueError("noise_sd must be >= 0")
        if not 0 <= self.missing_fraction < 1:
            raise ValueError("missing_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> SyntheticSpec:
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SyntheticSpec fields: {sorted(unknown)}")
        return cls(**obj)


def gen_low_rank(
    n: int, m: int, rank: int, noise_sd: float = 0.0, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """``A = L @ R.T + noise`` with standard normal factors.

    Returns:
        The noisy matrix and the noiseless ground truth ``L @ R.T``.
    """
    if rank < 1 or rank > min(n, m):
        raise RankError(f"rank {rank} not in [1, {min(n, m)}]")
    rng = np.random.default_rng(seed)
    L = rng.standard_normal((n, rank))
    R = rng.standard_normal((m, rank))
    truth = L @ R.T
    return truth + noise_sd * rng.standard_normal((n, m)), truth


def _bin_equal_width(s: np.ndarray, k: int) -> np.ndarray:
    lo, hi = float(s.min()), float(s.max())
    if hi == lo:
        return np.zeros(s.size, dtype=np.int64)
    edges = lo + (hi - lo) * np.arange(1, k) / k
    return np.searchsorted(edges, s, side="right").astype(np.int64)


def _damp_planted(load: np.ndarray, n_planted: int) -> np.ndarray:
    norms = np.linalg.norm(load, axis=1)
    load = load.copy()
    load[:, :n_planted] *= PLANTED_LEAKAGE
    scaled = np.linalg.norm(load, axis=1)
    return load * np.where(scaled > 0, norms / np.where(scaled > 0, scaled, 1.0), 1.0)[:, None]


def gen_mixed_synthetic(spec: SyntheticSpec) -> tuple[MixedTable, MixedTable]:
    """Masked synthetic table plus its complete ground truth.

    Continuous features ``c0, c1, ...`` and categorical features ``k0, ...``
    are noisy linear functions of shared latent factors. The first three
    continuous columns measure latent factors 0, 1, 2 directly (clipped to the
    available rank and column count); all other columns mix every factor, their
    loadings on factors 0..2 scaled down by ``PLANTED_LEAKAGE`` and each
    loading vector then rescaled to its original norm, so the signal-to-noise
    ratio is unchanged. The target is a fixed linear function of latent
    factors 0..2 plus noise, so ``c0..c2`` are the planted informative features.

    In panel mode every feature appears twice (suffixes ``_03`` and ``_12``,
    independent noise), plus ``age_12``, an ``elapsed_years`` column with two
    values, and an ``age_group`` group key binned from ``age_12``.
    """
    rng = np.random.default_rng(spec.seed)
    n, r = spec.n_rows, spec.latent_rank
    Z = rng.standard_normal((n, r))
    n_planted = min(3, r, spec.n_continuous)

    cont_load = _damp_planted(rng.standard_normal((spec.n_continuous, r)), n_planted)
    for j in range(n_planted):
        cont_load[j] = 0.0
        cont_load[j, j] = 1.0
    cont_loc = rng.uniform(-5.0, 5.0, spec.n_continuous).round(1)
    cont_scale = rng.uniform(1.0, 4.0, spec.n_continuous).round(1)
    cat_load = _damp_planted(rng.standard_normal((spec.n_categorical, r)), n_planted)

    waves = ("_03", "_12") if spec.panel_mode else ("",)
    schema: list[ColumnSchema] = []
    cols: list[np.ndarray] = []
    for suffix in waves:
        for j in range(spec.n_continuous):
            x = Z @ cont_load[j] + spec.noise_sd * rng.standard_normal(n)
            schema.append(ColumnSchema.continuous(f"c{j}{suffix}"))
            cols.append(cont_loc[j] + cont_scale[j] * x)
        for j in range(spec.n_categorical):
            s = Z @ cat_load[j] + spec.noise_sd * rng.standard_normal(n)
            levels = [f"L{i}" for i in range(spec.levels_per_cat)]
            schema.append(ColumnSchema.categorical(f"k{j}{suffix}", levels))
            cols.append(_bin_equal_width(s, spec.levels_per_cat))

    weights = np.zeros(r)
    weights[:n_planted] = PLANTED_WEIGHTS[:n_planted]
    target = Z @ weights + spec.noise_sd * rng.standard_normal(n)
    if spec.panel_mode:
        age = rng.uniform(45.0, 90.0, n).round(0)
        elapsed = np.array(ELAPSED_YEARS)[rng.integers(0, 2, n)]
        target = target - 0.05 * (age - 65.0) - 0.1 * elapsed
        schema.append(ColumnSchema.continuous("age_12"))
        cols.append(age)
        schema.append(ColumnSchema.continuous("elapsed_years"))
        cols.append(elapsed)
        schema.append(ColumnSchema.categorical("age_group", AGE_GROUP_LABELS, Role.GROUP_KEY))
        cols.append(np.searchsorted(np.array(AGE_GROUP_EDGES), age, side="right").astype(np.int64))
    schema.append(ColumnSchema.continuous("target", Role.TARGET))
    cols.append(50.0 + 10.0 * target)

    truth = MixedTable(schema, cols)
    mask_seed = int(np.random.default_rng([spec.seed, 1]).integers(2**63))
    return mask_random(truth, spec.missing_fraction, mask_seed), truth


def mask_random(table: MixedTable, fraction: float, seed: int = 0) -> MixedTable:
    """Independently blank each feature cell with probability ``fraction``.

    Target and group-key columns are never touched. A column that would end up
    with no observed cell has its mask redrawn, up to 100 times.

    Raises:
        MaskingError: a column stayed fully missing after 100 redraws.
    """
    if not 0 <= fraction < 1:
        raise ValueError("fraction must be in [0, 1)")
    if fraction == 0:
        return table
    rng = np.random.default_rng(seed)
    miss_before = table.missing()
    out = []
    for j, (col, arr) in enumerate(zip(table.schema, table.columns)):
        if col.role is not Role.FEATURE:
            out.append(arr)
            continue
        for _ in range(101):
            hide = rng.random(table.n_rows) < fraction
            if (~(hide | miss_before[:, j])).any():
                break
        else:
            raise MaskingError(f"column {col.name!r} became all-missing in 100 retries")
        new = arr.copy()
        new[hide] = MISSING_CODE if col.is_categorical else np.nan
        out.append(new)
    return MixedTable(table.schema, out)


def baseline_impute(table: MixedTable) -> MixedTable:
    """Median for continuous columns (lower middle), mode for categoricals.

    Mode ties go to the lowest level index. Every column is filled, target
    included.
    """
    out = []
    for col, arr in zip(table.schema, table.columns):
        new = arr.copy()
        if col.is_categorical:
            obs = arr != MISSING_CODE
            if not obs.any():
                raise DegenerateColumnError(f"column {col.name!r} has no observed values")
            counts = np.bincount(arr[obs], minlength=len(col.levels))
            new[~obs] = int(np.argmax(counts))
        else:
            obs = ~np.isnan(arr)
            if not obs.any():
                raise DegenerateColumnError(f"column {col.name!r} has no observed values")
            vals = np.sort(arr[obs])
            new[~obs] = vals[(vals.size - 1) // 2]
        out.append(new)
    return MixedTable(table.schema, out)


def design_matrix(table: MixedTable) -> tuple[np.ndarray, np.ndarray | None, list[str]]:
    """Feature matrix for the tree model: continuous values and level indices.

    Only ``feature`` columns enter X. Returns ``(X, y, feature_names)`` with
    ``y`` None when there is no target column.
    """
    feats = [c for c in table.schema if c.role is Role.FEATURE]
    X = np.column_stack([table.column(c.name).astype(np.float64) for c in feats]) if feats \
        else np.zeros((table.n_rows, 0))
    if any(c.is_categorical for c in feats):
        X = X.copy()
        for j, c in enumerate(feats):
            if c.is_categorical:
                X[X[:, j] == MISSING_CODE, j] = np.nan
    y = table.column(table.target).copy() if table.target else None
    return X, y, [c.name for c in feats]


def imputation_quality(
    completed: MixedTable, truth: MixedTable, masked: MixedTable
) -> tuple[float | None, float | None]:
    """Held-out continuous RMSE and categorical accuracy over the masked cells."""
    miss = masked.missing()
    sq, n_cont, hits, n_cat = 0.0, 0, 0, 0
    for j, col in enumerate(masked.schema):
        m = miss[:, j]
        if not m.any():
            continue
        got = completed.column(col.name)[m]
        want = truth.column(col.name)[m]
        if col.is_categorical:
            hits += int(np.sum(got == want))
            n_cat += int(m.sum())
        else:
            sq += float(np.sum((got - want) ** 2))
            n_cont += int(m.sum())
    rmse = float(np.sqrt(sq / n_cont)) if n_cont else None
    acc = hits / n_cat if n_cat else None
    return rmse, acc


@dataclass(frozen=True)
class GroupRmse:
    group: str
    rmse: float | None
    n: int


def stratified_rmse(
    predictions: Sequence[float],
    truths: Sequence[float],
    groups: Sequence[str],
    labels: Sequence[str] | None = None,
) -> tuple[list[GroupRmse], float]:
    """RMSE per group label (sorted) and overall.

    Labels listed in ``labels`` but absent from ``groups`` are reported with
    ``n = 0`` and no RMSE.
    """
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    g = np.asarray(groups, dtype=object)
    if not (p.shape == t.shape == g.shape):
        raise LengthError("predictions, truths and groups must have equal length")
    err = (p - t) ** 2
    names = sorted(set(g.tolist()) | set(labels or ()))
    out = []
    for name in names:
        sel = g == name
        k = int(sel.sum())
        out.append(GroupRmse(name, float(np.sqrt(np.mean(err[sel]))) if k else None, k))
    overall = float(np.sqrt(np.mean(err))) if err.size else float("nan")
    return out, overall


@dataclass(frozen=True)
class MetricRow:
    strategy: str
    metric: str
    mean: float
    std: float
    n: int


@dataclass(frozen=True)
class GroupRow:
    strategy: str
    group: str
    rmse_mean: float | None
    rmse_std: float | None
    n: int


@dataclass
class BenchmarkReport:
    metrics: list[MetricRow]
    stratified: list[GroupRow]
    config: dict
    fold_rmse: dict[str, list[float]] = field(default_factory=dict)
    arm_fingerprints: dict[str, dict[str, str]] = field(default_factory=dict)
    lambda_star: float | None = None

    def value(self, strategy: str, metric: str) -> MetricRow:
        for row in self.metrics:
            if row.strategy == strategy and row.metric == metric:
                return row
        raise KeyError((strategy, metric))

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strategy", "metric", "mean", "std", "n"])
        for r in self.metrics:
            w.writerow([r.strategy, r.metric, repr(r.mean), repr(r.std), r.n])
        return buf.getvalue()

    def stratified_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strategy", "group", "rmse_mean", "rmse_std", "n"])
        for r in self.stratified:
            w.writerow([r.strategy, r.group, "" if r.rmse_mean is None else repr(r.rmse_mean),
                        "" if r.rmse_std is None else repr(r.rmse_std), r.n])
        return buf.getvalue()

    def folds_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strategy", "fold", "rmse"])
        for strat, vals in self.fold_rmse.items():
            for k, v in enumerate(vals):
                w.writerow([strat, k, repr(v)])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'strategy':<10} {'metric':<15} {'mean':>12} {'std':>10} {'n':>4}"]
        for r in self.metrics:
            lines.append(f"{r.strategy:<10} {r.metric:<15} {r.mean:>12.5f} {r.std:>10.5f} {r.n:>4}")
        if self.stratified:
            lines.append("")
            lines.append(f"{'strategy':<10} {'group':<10} {'rmse':>12} {'std':>10} {'n':>5}")
            for g in self.stratified:
                mean = "-" if g.rmse_mean is None else f"{g.rmse_mean:.5f}"
                std = "-" if g.rmse_std is None else f"{g.rmse_std:.5f}"
                lines.append(f"{g.strategy:<10} {g.group:<10} {mean:>12} {std:>10} {g.n:>5}")
        lines.append("")
        lines.append("config: " + json.dumps(self.config, sort_keys=True))
        return "\n".join(lines) + "\n"


def _sha(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def _stratify(strategy: str, oof: np.ndarray, y: np.ndarray, fold_ids: np.ndarray,
              groups: np.ndarray, labels: Sequence[str]) -> list[GroupRow]:
    rows = []
    for label in labels:
        sel = groups == label
        per_fold = []
        for k in np.unique(fold_ids):
            s = sel & (fold_ids == k)
            if s.any():
                per_fold.append(float(np.sqrt(np.mean((oof[s] - y[s]) ** 2))))
        if per_fold:
            rows.append(GroupRow(strategy, label, float(np.mean(per_fold)), float(np.std(per_fold)), int(sel.sum())))
        else:
            rows.append(GroupRow(strategy, label, None, None, 0))
    return rows


def compare_strategies(
    spec: SyntheticSpec,
    impute_config: ImputeConfig | None = None,
    gbt_params: GbtParams | None = None,
    folds: int = 10,
    threads: int = 1,
) -> BenchmarkReport:
    """Run SVD and median/mode imputation on one synthetic instance.

    Both arms share the masked table, the target, the CV fold partition and
    the model seed. Reported metrics per arm: ``cv_rmse`` (mean/std over
    folds), ``imp_rmse_cont`` (held-out RMSE in raw units), ``imp_nrmse_cont``
    (the same after dividing each column's errors by its ground-truth std) and
    ``imp_acc_cat`` (held-out categorical accuracy).
    """
    impute_config = impute_config or ImputeConfig(seed=spec.seed)
    gbt_params = gbt_params or GbtParams(seed=spec.seed)
    masked, truth = gen_mixed_synthetic(spec)

    arms: dict[str, MixedTable] = {}
    svd_result = impute(masked, impute_config, threads=threads)
    arms["svd"] = svd_result.completed
    arms["baseline"] = baseline_impute(masked)

    cv_seed = int(np.random.default_rng([spec.seed, 2]).integers(2**63))
    metrics: list[MetricRow] = []
    stratified: list[GroupRow] = []
    fold_rmse: dict[str, list[float]] = {}
    fingerprints: dict[str, dict[str, str]] = {}
    group_col = masked.group_key
    for name, completed in arms.items():
        X, y, _ = design_matrix(completed)
        rmses, oof, fold_ids = cross_validate_predictions(X, y, gbt_params, folds, cv_seed, threads)
        fold_rmse[name] = rmses
        fingerprints[name] = {"mask": _sha(masked.missing()), "folds": _sha(fold_ids), "target": _sha(y)}
        metrics.append(MetricRow(name, "cv_rmse", float(np.mean(rmses)), float(np.std(rmses)), len(rmses)))

        rmse, acc = imputation_quality(completed, truth, masked)
        scaled = _normalized_rmse(completed, truth, masked)
        metrics.append(MetricRow(name, "imp_rmse_cont", rmse if rmse is not None else float("nan"), 0.0, 1))
        metrics.append(MetricRow(name, "imp_nrmse_cont", scaled if scaled is not None else float("nan"), 0.0, 1))
        metrics.append(MetricRow(name, "imp_acc_cat", acc if acc is not None else float("nan"), 0.0, 1))

        if group_col:
            groups = np.array(completed.labels(group_col), dtype=object)
            labels = masked.column_schema(group_col).levels
        else:
            groups = np.full(len(y), "all", dtype=object)
            labels = ("all",)
        stratified += _stratify(name, oof, y, fold_ids, groups, labels)

    config = {
        "spec": spec.to_dict(),
        "impute": impute_config.to_dict(),
        "gbt": gbt_params.to_dict(),
        "folds": folds,
        "cv_seed": cv_seed,
    }
    return BenchmarkReport(metrics, stratified, config, fold_rmse, fingerprints, svd_result.lambda_star)


def _normalized_rmse(completed: MixedTable, truth: MixedTable, masked: MixedTable) -> float | None:
    miss = masked.missing()
    sq, count = 0.0, 0
    for j, col in enumerate(masked.schema):
        m = miss[:, j]
        if col.is_categorical or not m.any():
            continue
        full = truth.column(col.name)
        sd = float(np.std(full, ddof=1)) or 1.0
        sq += float(np.sum(((completed.column(col.name)[m] - full[m]) / sd) ** 2))
        count += int(m.sum())
    return float(np.sqrt(sq / count)) if count else None


def write_report(report: BenchmarkReport, out_dir: str | Path) -> list[Path]:
    """Write metrics, per-fold, stratified CSVs and the text table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "metrics.csv": report.metrics_csv(),
        "folds.csv": report.folds_csv(),
        "stratified.csv": report.stratified_csv(),
        "report.txt": report.to_text(),
    }
    paths = []
    for name, text in files.items():
        p = out / name
        p.write_text(text, encoding="utf-8")
        paths.append(p)
    return paths
