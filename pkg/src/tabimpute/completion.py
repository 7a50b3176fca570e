"""Iterative hard-thresholded SVD imputation with a cross-validated threshold.

The loop alternates between a rank-reducing reconstruction and re-imposing the
observed entries. The threshold is chosen by hiding random folds of observed
entries and scoring how well each candidate recovers them.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InsufficientDataError
from .linalg import hard_threshold_reconstruct, svd
from .tabular import EncodedMatrix, MixedTable, Role, decode, encode

logger = logging.getLogger(__name__)

__all__ = [
    "ImputeConfig",
    "TraceStep",
    "ConvergenceTrace",
    "CvTable",
    "ImputeResult",
    "impute_once",
    "lambda_grid",
    "entry_folds",
    "select_lambda",
    "complete_matrix",
    "impute",
]


@dataclass(frozen=True)
class ImputeConfig:
    grid_size: int = 20
    folds: int = 5
    tolerance: float = 1e-4
    max_iterations: int = 200
    seed: int = 0
    include_target: bool = False
    svd_method: str = "lapack"

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.grid_size < 2:
            raise ValueError("grid_size must be >= 2")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TraceStep:
    fit_rmse: float
    delta: float


@dataclass
class ConvergenceTrace:
    """Per-iteration diagnostics of one imputation loop.

    ``penultimate`` holds the iterate before the final one so the last delta
    can be recomputed independently.
    """

    steps: list[TraceStep] = field(default_factory=list)
    penultimate: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def __getitem__(self, i):
        return self.steps[i]

    @property
    def final_delta(self) -> float:
        return self.steps[-1].delta


@dataclass(frozen=True)
class CvTable:
    lambdas: np.ndarray
    fold_mse: np.ndarray  # folds x grid

    @property
    def mean_mse(self) -> np.ndarray:
        return self.fold_mse.mean(axis=0)

    def __len__(self) -> int:
        return len(self.lambdas)

    def rows(self) -> list[tuple[float, float]]:
        return [(float(lam), float(m)) for lam, m in zip(self.lambdas, self.mean_mse)]


@dataclass
class ImputeResult:
    completed: MixedTable
    lambda_star: float
    iterations: int
    trace: ConvergenceTrace
    cv_table: CvTable
    encoded: EncodedMatrix | None = None
    imputed_matrix: np.ndarray | None = None


def _rms(a: np.ndarray) -> float:
    return float(np.sqrt(np.mean(a * a))) if a.size else 0.0


def impute_once(
    values: np.ndarray,
    mask: np.ndarray,
    lam: float,
    tolerance: float = 1e-4,
    max_iterations: int = 200,
    svd_method: str = "lapack",
) -> tuple[np.ndarray, ConvergenceTrace]:
    """Run the hard-impute loop at a fixed threshold.

    Each pass decomposes the current matrix, keeps singular values above
    ``lam``, writes the reconstruction into the missing cells and restores the
    observed ones. Stops once the RMS change of the missing cells is at most
    ``tolerance`` or after ``max_iterations`` passes.

    Args:
        values: n x d matrix whose missing cells hold the starting guess.
        mask: boolean n x d, true where observed.
        lam: singular-value threshold.
        tolerance: stopping level for the RMS change of imputed cells.
        max_iterations: pass budget.

    Returns:
        The completed matrix and its convergence trace.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if values.shape != mask.shape:
        raise ValueError("values and mask shapes differ")
    missing = ~mask
    observed_vals = values[mask]
    X = values.copy()
    trace = ConvergenceTrace()
    for _ in range(max_iterations):
        recon = hard_threshold_reconstruct(svd(X, method=svd_method), lam)
        new = np.where(mask, values, recon)
        fit_rmse = _rms(recon[mask] - observed_vals)
        delta = _rms(new[missing] - X[missing])
        trace.penultimate = X
        trace.steps.append(TraceStep(fit_rmse, delta))
        X = new
        if delta <= tolerance:
            break
    return X, trace


def lambda_grid(values: np.ndarray, mask: np.ndarray, grid_size: int, svd_method: str = "lapack") -> np.ndarray:
    """Geometric grid from sigma_1/1000 to sigma_1 of the zero-filled matrix."""
    sigma1 = float(svd(np.where(mask, values, 0.0), method=svd_method).S[0])
    if sigma1 == 0.0:
        return np.zeros(grid_size)
    return np.geomspace(sigma1 / 1000.0, sigma1, grid_size)


def entry_folds(mask: np.ndarray, folds: int, seed: int) -> np.ndarray:
    """Assign every observed entry to a fold; missing entries get -1.

    Observed entries (row-major order) are shuffled with the seeded generator
    and dealt round-robin, so fold sizes differ by at most one.
    """
    flat = np.flatnonzero(mask)
    perm = np.random.default_rng(seed).permutation(flat.size)
    assign = np.full(mask.size, -1, dtype=np.int64)
    assign[flat[perm]] = np.arange(flat.size) % folds
    return assign.reshape(mask.shape)


def select_lambda(
    values: np.ndarray,
    mask: np.ndarray,
    config: ImputeConfig,
    threads: int = 1,
) -> tuple[float, CvTable]:
    """Pick the threshold with the smallest mean held-out MSE.

    Ties go to the larger threshold.

    Raises:
        InsufficientDataError: fewer than ``10 * folds`` observed entries.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    n_obs = int(mask.sum())
    if n_obs < config.folds * 10:
        raise InsufficientDataError(
            f"{n_obs} observed entries; need at least {config.folds * 10} for {config.folds}-fold CV"
        )
    grid = lambda_grid(values, mask, config.grid_size, config.svd_method)
    assign = entry_folds(mask, config.folds, config.seed)

    def run_cell(cell: tuple[int, int]) -> float:
        k, g = cell
        hidden = assign == k
        train = mask & ~hidden
        start = np.where(train, values, 0.0)
        completed, _ = impute_once(start, train, grid[g], config.tolerance,
                                   config.max_iterations, config.svd_method)
        err = completed[hidden] - values[hidden]
        return float(np.mean(err * err))

    cells = [(k, g) for k in range(config.folds) for g in range(config.grid_size)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(run_cell, cells))
    else:
        scores = [run_cell(c) for c in cells]
    fold_mse = np.array(scores).reshape(config.folds, config.grid_size)
    table = CvTable(grid, fold_mse)
    mean = table.mean_mse
    best = int(np.flatnonzero(mean == mean.min())[-1])
    logger.debug("lambda grid %s -> mean mse %s; chose %g", grid, mean, grid[best])
    return float(grid[best]), table


def complete_matrix(
    values: np.ndarray, mask: np.ndarray, config: ImputeConfig, threads: int = 1
) -> tuple[np.ndarray, float, ConvergenceTrace, CvTable]:
    """Threshold search followed by the final imputation over the full mask."""
    start = np.where(mask, values, 0.0)
    lam, table = select_lambda(start, mask, config, threads=threads)
    completed, trace = impute_once(start, mask, lam, config.tolerance,
                                   config.max_iterations, config.svd_method)
    return completed, lam, trace, table


def imputation_columns(table: MixedTable, include_target: bool) -> list[str]:
    return [c.name for c in table.schema if include_target or c.role is not Role.TARGET]


def impute(table: MixedTable, config: ImputeConfig | None = None, threads: int = 1) -> ImputeResult:
    """Encode, choose the threshold, impute, and decode a mixed table.

    Unless ``config.include_target`` is set, the target column stays out of
    the matrix and is passed through as-is, missing cells included.
    """
    config = config or ImputeConfig()
    names = imputation_columns(table, config.include_target)
    sub = table.select(names)
    enc = encode(sub)
    completed, lam, trace, cv = complete_matrix(enc.values, enc.mask, config, threads=threads)
    decoded = decode(enc.with_values(completed), sub)
    out = table.with_columns(dict(zip(names, decoded.columns)))
    logger.info("lambda*=%g after %d iterations (final delta %.3g)", lam, len(trace), trace.final_delta)
    return ImputeResult(out, lam, len(trace), trace, cv, enc, completed)
