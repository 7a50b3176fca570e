import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_mixed_table
from tabimpute.bench import (
    AGE_GROUP_LABELS,
    ELAPSED_YEARS,
    SyntheticSpec,
    baseline_impute,
    compare_strategies,
    design_matrix,
    gen_low_rank,
    gen_mixed_synthetic,
    imputation_quality,
    mask_random,
    stratified_rmse,
    write_report,
)
from tabimpute.completion import ImputeConfig
from tabimpute.errors import DegenerateColumnError, LengthError, MaskingError, RankError
from tabimpute.gbt import GbtParams
from tabimpute.linalg import svd
from tabimpute.tabular import ColumnSchema, MixedTable, Role

FAST_GBT = GbtParams(n_trees=30, max_depth=3)


def test_low_rank_spectrum():
    A, truth = gen_low_rank(30, 20, 4, 0.0, seed=1)
    assert np.array_equal(A, truth)
    s = svd(A).S
    assert np.sum(s > 1e-8 * s[0]) == 4


def test_rank_one_minors_vanish():
    A, _ = gen_low_rank(6, 5, 1, 0.0, seed=2)
    for i in range(6):
        for k in range(i + 1, 6):
            for j in range(5):
                for l in range(j + 1, 5):
                    assert abs(A[i, j] * A[k, l] - A[i, l] * A[k, j]) < 1e-9


def test_low_rank_determinism_and_errors():
    a, b = gen_low_rank(10, 8, 2, 0.3, seed=3), gen_low_rank(10, 8, 2, 0.3, seed=3)
    assert np.array_equal(a[0], b[0])
    with pytest.raises(RankError):
        gen_low_rank(4, 3, 4)
    with pytest.raises(RankError):
        gen_low_rank(4, 3, 0)


def test_spec_validation_and_round_trip():
    with pytest.raises(RankError):
        SyntheticSpec(n_continuous=1, n_categorical=1, latent_rank=3)
    with pytest.raises(ValueError):
        SyntheticSpec(missing_fraction=1.0)
    spec = SyntheticSpec(n_rows=50, seed=4, panel_mode=True)
    assert SyntheticSpec.from_dict(spec.to_dict()) == spec


def test_mixed_no_missing_equals_truth():
    masked, truth = gen_mixed_synthetic(SyntheticSpec(missing_fraction=0.0, seed=5))
    assert masked == truth and truth.n_missing == 0


def test_mixed_missing_count_binomial_band():
    spec = SyntheticSpec(n_rows=200, n_continuous=6, n_categorical=4, missing_fraction=0.3, seed=6)
    masked, truth = gen_mixed_synthetic(spec)
    feats = [j for j, c in enumerate(masked.schema) if c.role is Role.FEATURE]
    observed = int((~masked.missing()[:, feats]).sum())
    mean, sd = 0.7 * 2000, math.sqrt(2000 * 0.3 * 0.7)
    assert abs(observed - mean) <= 3 * sd
    assert masked.target == "target" and not np.isnan(masked.column("target")).any()
    for j in range(masked.n_cols):
        obs = ~masked.missing()[:, j]
        assert np.array_equal(masked.columns[j][obs], truth.columns[j][obs])


def test_mixed_layout():
    masked, truth = gen_mixed_synthetic(SyntheticSpec(n_rows=40, n_continuous=3, n_categorical=2,
                                                      levels_per_cat=4, latent_rank=2, seed=7))
    assert masked.names == ["c0", "c1", "c2", "k0", "k1", "target"]
    assert masked.column_schema("k1").levels == ("L0", "L1", "L2", "L3")


def test_panel_mode():
    masked, truth = gen_mixed_synthetic(SyntheticSpec(n_rows=300, panel_mode=True, seed=8))
    assert set(np.unique(truth.column("elapsed_years"))) == set(ELAPSED_YEARS)
    assert "c0_03" in truth.names and "c0_12" in truth.names and "age_12" in truth.names
    assert masked.group_key == "age_group"
    assert masked.column_schema("age_group").levels == AGE_GROUP_LABELS
    assert not (masked.column("age_group") < 0).any()
    _, _, names = design_matrix(masked)
    assert "age_group" not in names and "target" not in names


def test_mask_random_examples(rng):
    t = random_mixed_table(rng, n_rows=100, n_cont=5, n_cat=5, missing=0.0)
    assert mask_random(t, 0.0, 1) == t
    m = mask_random(t, 0.5, 1)
    assert abs(m.n_missing - 500) <= 3 * math.sqrt(250)
    assert mask_random(t, 0.5, 1) == m
    assert mask_random(t, 0.5, 2) != m
    with pytest.raises(ValueError):
        mask_random(t, 1.0, 1)


def test_mask_random_retry_exhaustion():
    t = MixedTable([ColumnSchema.continuous("a")], [np.array([1.0])])
    with pytest.raises(MaskingError):
        mask_random(t, 0.999999, 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), frac=st.floats(0.0, 0.9))
def test_mask_hygiene_property(seed, frac):
    rng = np.random.default_rng(seed)
    base = random_mixed_table(rng, n_rows=15, n_cont=2, n_cat=1, missing=0.0, with_target=True)
    schema = list(base.schema) + [ColumnSchema.categorical("grp", ["a", "b"], Role.GROUP_KEY)]
    t = MixedTable(schema, list(base.columns) + [rng.integers(0, 2, 15)])
    m = mask_random(t, frac, seed)
    assert np.array_equal(m.column("y"), t.column("y"))
    assert np.array_equal(m.column("grp"), t.column("grp"))
    assert (~m.missing()).any(axis=0).all()


def test_baseline_examples():
    t = MixedTable.from_rows(
        [ColumnSchema.continuous("x"), ColumnSchema.categorical("c", ["a", "b"]),
         ColumnSchema.categorical("d", ["a", "b"])],
        [[1.0, "a", "a"], [2.0, "a", "b"], [100.0, "b", None], [None, None, None]],
    )
    out = baseline_impute(t)
    assert out.column("x")[3] == 2.0
    assert out.labels("c")[3] == "a"
    assert out.labels("d")[2:] == ["a", "a"]


def test_baseline_even_count_uses_lower_middle():
    t = MixedTable([ColumnSchema.continuous("x")], [np.array([4.0, 1.0, 3.0, 2.0, np.nan])])
    assert baseline_impute(t).column("x")[4] == 2.0


def test_baseline_degenerate():
    t = MixedTable([ColumnSchema.continuous("x")], [np.array([np.nan, np.nan])])
    with pytest.raises(DegenerateColumnError):
        baseline_impute(t)


def test_imputation_quality_counts_only_masked_cells():
    truth = MixedTable.from_rows([ColumnSchema.continuous("x"), ColumnSchema.categorical("c", ["a", "b"])],
                                 [[1.0, "a"], [2.0, "b"], [3.0, "a"], [4.0, "b"]])
    masked = MixedTable.from_rows(list(truth.schema), [[1.0, "a"], [None, None], [None, "a"], [4.0, None]])
    completed = MixedTable.from_rows(list(truth.schema), [[1.0, "a"], [5.0, "b"], [3.0, "a"], [4.0, "a"]])
    rmse, acc = imputation_quality(completed, truth, masked)
    assert rmse == pytest.approx(math.sqrt(9 / 2)) and acc == 0.5


def test_stratified_examples():
    groups, overall = stratified_rmse([1, 2, 3], [1, 2, 5], ["a", "a", "a"])
    assert groups[0].rmse == overall and groups[0].n == 3
    p = np.zeros(7)
    t = np.array([0, 0, 0, 2, 2, 2, 2.0])
    g = ["x"] * 3 + ["y"] * 4
    groups, overall = stratified_rmse(p, t, g, labels=["x", "y", "z"])
    assert [(r.group, r.rmse, r.n) for r in groups] == [("x", 0.0, 3), ("y", 2.0, 4), ("z", None, 0)]
    assert overall == pytest.approx(math.sqrt(4 * 4 / 7))
    assert sum(r.n for r in groups) == 7
    with pytest.raises(LengthError):
        stratified_rmse([1, 2], [1], ["a", "a"])


def test_compare_no_missing_strategies_coincide():
    spec = SyntheticSpec(n_rows=60, n_continuous=4, n_categorical=2, latent_rank=2, missing_fraction=0.0, seed=9)
    rep = compare_strategies(spec, ImputeConfig(seed=9), FAST_GBT, folds=3)
    assert rep.fold_rmse["svd"] == rep.fold_rmse["baseline"]
    assert rep.value("svd", "cv_rmse").mean == rep.value("baseline", "cv_rmse").mean


def test_compare_report_shape_and_fairness(tmp_path):
    spec = SyntheticSpec(n_rows=80, n_continuous=5, n_categorical=2, latent_rank=2, missing_fraction=0.3, seed=10)
    rep = compare_strategies(spec, ImputeConfig(seed=10), FAST_GBT, folds=4, threads=2)
    got = {(m.strategy, m.metric) for m in rep.metrics}
    want = {(s, k) for s in ("svd", "baseline") for k in ("cv_rmse", "imp_rmse_cont", "imp_nrmse_cont", "imp_acc_cat")}
    assert got == want
    assert all(m.std >= 0 for m in rep.metrics)
    assert rep.arm_fingerprints["svd"] == rep.arm_fingerprints["baseline"]
    for arm in ("svd", "baseline"):
        rows = [r for r in rep.stratified if r.strategy == arm]
        assert sum(r.n for r in rows) == 80
        assert len(rep.fold_rmse[arm]) == 4
    paths = write_report(rep, tmp_path / "out")
    assert sorted(p.name for p in paths) == ["folds.csv", "metrics.csv", "report.txt", "stratified.csv"]
    assert "svd" in (tmp_path / "out" / "report.txt").read_text()


def test_compare_panel_mode_stratifies_by_age_group():
    spec = SyntheticSpec(n_rows=120, n_continuous=3, n_categorical=1, latent_rank=2, panel_mode=True, seed=11)
    rep = compare_strategies(spec, ImputeConfig(seed=11), FAST_GBT, folds=3)
    groups = [r.group for r in rep.stratified if r.strategy == "svd"]
    assert groups == sorted(AGE_GROUP_LABELS)
    assert sum(r.n for r in rep.stratified if r.strategy == "svd") == 120


def test_compare_deterministic():
    spec = SyntheticSpec(n_rows=60, n_continuous=4, n_categorical=2, latent_rank=2, seed=12)
    a = compare_strategies(spec, ImputeConfig(seed=12), FAST_GBT, folds=3, threads=1)
    b = compare_strategies(spec, ImputeConfig(seed=12), FAST_GBT, folds=3, threads=3)
    assert a.metrics_csv() == b.metrics_csv() and a.stratified_csv() == b.stratified_csv()
