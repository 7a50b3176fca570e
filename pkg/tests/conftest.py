import sys
from pathlib import Path

import numpy as np
import pytest

from tabimpute.tabular import MISSING_CODE, ColumnSchema, MixedTable, Role

TESTS = Path(__file__).parent
FIXTURES = TESTS / "fixtures"
sys.path.insert(0, str(TESTS))


def random_mixed_table(rng, n_rows=30, n_cont=3, n_cat=2, missing=0.3, with_target=False):
    """Random mixed table where every column keeps at least two observed cells."""
    schema, cols = [], []
    for j in range(n_cont):
        schema.append(ColumnSchema.continuous(f"x{j}"))
        v = rng.normal(rng.uniform(-10, 10), rng.uniform(0.5, 5), n_rows)
        cols.append(v)
    for j in range(n_cat):
        k = int(rng.integers(2, 5))
        schema.append(ColumnSchema.categorical(f"g{j}", [f"v{i}" for i in range(k)]))
        cols.append(rng.integers(0, k, n_rows))
    if with_target:
        schema.append(ColumnSchema.continuous("y", Role.TARGET))
        cols.append(rng.normal(size=n_rows))
    out = []
    for col, arr in zip(schema, cols):
        if col.role is Role.FEATURE:
            hide = rng.random(n_rows) < missing
            hide[rng.choice(n_rows, 2, replace=False)] = False
            arr = arr.copy()
            arr[hide] = MISSING_CODE if col.is_categorical else np.nan
        out.append(arr)
    return MixedTable(schema, out)


@pytest.fixture
def rng():
    return np.random.default_rng(20260101)


@pytest.fixture
def fixture_dir():
    return FIXTURES
