"""Mixed-type tabular imputation by cross-validated hard-thresholded SVD,
with a boosted-tree regressor, exact Shapley attribution, association
statistics and a synthetic benchmark harness."""

__version__ = "0.1.0"

from .completion import ImputeConfig, ImputeResult, impute
from .gbt import GbtModel, GbtParams
from .tabular import ColumnSchema, Kind, MixedTable, Role, decode, encode, load_csv, load_schema

__all__ = [
    "ColumnSchema",
    "GbtModel",
    "GbtParams",
    "ImputeConfig",
    "ImputeResult",
    "Kind",
    "MixedTable",
    "Role",
    "decode",
    "encode",
    "impute",
    "load_csv",
    "load_schema",
]
