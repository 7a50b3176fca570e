"""Gradient-boosted regression trees with squared-error loss.

Each stage fits a depth-limited tree to the current residuals by exact greedy
split search over a per-tree random column subset. Leaf weights carry an L2
penalty, ``w = sum(r) / (count + l2_leaf)``, and every tree is scaled by the
learning rate before it is added to the ensemble.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import InsufficientDataError, ShapeError

__all__ = [
    "GbtParams",
    "Tree",
    "GbtModel",
    "fit",
    "predict",
    "cross_validate",
    "cross_validate_predictions",
    "row_folds",
]


@dataclass(frozen=True)
class GbtParams:
    n_trees: int = 300
    max_depth: int = 4
    learning_rate: float = 0.1
    l2_leaf: float = 1.0
    colsample: float = 0.8
    min_samples_leaf: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 0:
            raise ValueError("n_trees must be >= 0")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must be in (0, 1]")
        if not self.l2_leaf >= 0:
            raise ValueError("l2_leaf must be >= 0")
        if not 0 < self.colsample <= 1:
            raise ValueError("colsample must be in (0, 1]")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Tree:
    """Flat binary tree. Node ``i`` is a leaf when ``feature[i] == -1``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        best, stack = 0, [(0, 0)]
        while stack:
            node, d = stack.pop()
            if self.feature[node] < 0:
                best = max(best, d)
            else:
                stack += [(self.left[node], d + 1), (self.right[node], d + 1)]
        return best

    def used_features(self) -> list[int]:
        return sorted({int(f) for f in self.feature if f >= 0})

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of X."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            feat = self.feature[node]
            inner = feat >= 0
            if not inner.any():
                return node
            f = np.where(inner, feat, 0)
            go_left = X[rows, f] < self.threshold[node]
            node = np.where(inner, np.where(go_left, self.left[node], self.right[node]), node)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_nested(self, node: int = 0) -> dict:
        if self.feature[node] < 0:
            return {"leaf": float(self.value[node])}
        return {
            "feat": int(self.feature[node]),
            "thr": float(self.threshold[node]),
            "left": self.to_nested(int(self.left[node])),
            "right": self.to_nested(int(self.right[node])),
        }

    @classmethod
    def from_nested(cls, root: dict) -> Tree:
        feature, threshold, left, right, value = [], [], [], [], []

        def add(node: dict) -> int:
            i = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            if "leaf" in node:
                value[i] = float(node["leaf"])
            else:
                feature[i] = int(node["feat"])
                threshold[i] = float(node["thr"])
                left[i] = add(node["left"])
                right[i] = add(node["right"])
            return i

        add(root)
        return cls(np.array(feature, dtype=np.int64), np.array(threshold),
                   np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                   np.array(value), np.zeros(len(feature), dtype=np.int64))


@dataclass
class GbtModel:
    base_score: float
    trees: list[Tree]
    params: GbtParams
    feature_names: list[str]
    training_predictions: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return predict(self, X)

    def to_dict(self) -> dict:
        return {
            "base_score": self.base_score,
            "params": self.params.to_dict(),
            "feature_names": list(self.feature_names),
            "trees": [t.to_nested() for t in self.trees],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> GbtModel:
        return cls(
            base_score=float(obj["base_score"]),
            trees=[Tree.from_nested(t) for t in obj["trees"]],
            params=GbtParams(**obj["params"]),
            feature_names=list(obj["feature_names"]),
        )

    @classmethod
    def from_json(cls, text: str) -> GbtModel:
        return cls.from_dict(json.loads(text))


class _Builder:
    def __init__(self, X: np.ndarray, params: GbtParams):
        self.X = X
        self.p = params

    def build(self, resid: np.ndarray, features: np.ndarray) -> Tree:
        self.r = resid
        self.features = features
        self.nodes: list[list] = []
        self._grow(np.arange(self.X.shape[0]), 0)
        cols = list(zip(*self.nodes))
        return Tree(np.array(cols[0], dtype=np.int64), np.array(cols[1], dtype=np.float64),
                    np.array(cols[2], dtype=np.int64), np.array(cols[3], dtype=np.int64),
                    np.array(cols[4], dtype=np.float64), np.array(cols[5], dtype=np.int64))

    def _grow(self, idx: np.ndarray, depth: int) -> int:
        node = len(self.nodes)
        r = self.r[idx]
        self.nodes.append([-1, 0.0, -1, -1, float(r.sum() / (idx.size + self.p.l2_leaf)), idx.size])
        if depth >= self.p.max_depth or idx.size < 2 * self.p.min_samples_leaf:
            return node
        split = self._best_split(idx, r)
        if split is None:
            return node
        feat, thr = split
        go_left = self.X[idx, feat] < thr
        self.nodes[node][0] = feat
        self.nodes[node][1] = thr
        self.nodes[node][2] = self._grow(idx[go_left], depth + 1)
        self.nodes[node][3] = self._grow(idx[~go_left], depth + 1)
        return node

    def _best_split(self, idx: np.ndarray, r: np.ndarray) -> tuple[int, float] | None:
        lam, msl = self.p.l2_leaf, self.p.min_samples_leaf
        k = idx.size
        Xs = self.X[np.ix_(idx, self.features)]
        order = np.argsort(Xs, axis=0, kind="stable")
        vals = np.take_along_axis(Xs, order, axis=0)
        csum = np.cumsum(r[order], axis=0)
        total = csum[-1]
        n_left = np.arange(1, k)[:, None].astype(np.float64)
        g_left = csum[:-1]
        g_right = total - g_left
        gain = (g_left**2 / (n_left + lam) + g_right**2 / (k - n_left + lam)
                - total**2 / (k + lam))
        valid = vals[:-1] < vals[1:]
        valid[: msl - 1] = False
        valid[k - msl:] = False
        gain = np.where(valid, gain, -np.inf)
        # feature-major flattening: equal gains go to the lowest feature, then lowest threshold
        flat = gain.T.ravel()
        best = int(np.argmax(flat))
        if not flat[best] > 0.0:
            return None
        fpos, pos = divmod(best, k - 1)
        lo, hi = vals[pos, fpos], vals[pos + 1, fpos]
        thr = lo + (hi - lo) / 2.0
        if not lo < thr <= hi:
            thr = hi
        return int(self.features[fpos]), float(thr)


def _check_xy(X: np.ndarray, y: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray | None]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"X must be 2-D, got shape {X.shape}")
    if y is not None:
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ShapeError(f"X has {X.shape[0]} rows but y has shape {y.shape}")
        if not np.isfinite(y).all():
            raise ShapeError("y contains non-finite values")
    if not np.isfinite(X).all():
        raise ShapeError("X contains non-finite values")
    return X, y


def fit(
    X: np.ndarray,
    y: np.ndarray,
    params: GbtParams | None = None,
    feature_names: Sequence[str] | None = None,
) -> GbtModel:
    """Fit a boosted ensemble on squared error.

    Raises:
        ShapeError: X and y disagree in length, or contain non-finite values.
        InsufficientDataError: fewer than ``2 * min_samples_leaf`` rows.
    """
    params = params or GbtParams()
    X, y = _check_xy(X, y)
    n, m = X.shape
    if n < 2 * params.min_samples_leaf:
        raise InsufficientDataError(f"{n} rows; need at least {2 * params.min_samples_leaf}")
    if feature_names is None:
        feature_names = [f"x{j}" for j in range(m)]
    elif len(feature_names) != m:
        raise ShapeError(f"{len(feature_names)} feature names for {m} columns")

    rng = np.random.default_rng(params.seed)
    n_cols = min(m, math.ceil(params.colsample * m))
    base = float(np.mean(y))
    pred = np.full(n, base)
    builder = _Builder(X, params)
    trees = []
    for _ in range(params.n_trees):
        cols = np.sort(rng.choice(m, size=n_cols, replace=False)) if n_cols < m else np.arange(m)
        tree = builder.build(y - pred, cols)
        trees.append(tree)
        pred = pred + params.learning_rate * tree.predict(X)
    return GbtModel(base, trees, params, list(feature_names), training_predictions=pred)


def predict(model: GbtModel, X: np.ndarray) -> np.ndarray:
    """Ensemble output; rows go left when ``x[feature] < threshold``."""
    X, _ = _check_xy(X)
    if X.shape[1] != model.n_features:
        raise ShapeError(f"model expects {model.n_features} columns, got {X.shape[1]}")
    pred = np.full(X.shape[0], model.base_score)
    eta = model.params.learning_rate
    for tree in model.trees:
        pred = pred + eta * tree.predict(X)
    return pred


def row_folds(n: int, folds: int, seed: int) -> np.ndarray:
    """Seeded random partition of ``n`` rows into ``folds`` near-equal groups."""
    perm = np.random.default_rng(seed).permutation(n)
    assign = np.empty(n, dtype=np.int64)
    assign[perm] = np.arange(n) % folds
    return assign


def cross_validate_predictions(
    X: np.ndarray,
    y: np.ndarray,
    params: GbtParams | None = None,
    folds: int = 10,
    seed: int = 0,
    threads: int = 1,
) -> tuple[list[float], np.ndarray, np.ndarray]:
    """K-fold CV returning per-fold RMSE, out-of-fold predictions and fold ids."""
    params = params or GbtParams()
    X, y = _check_xy(X, y)
    n = X.shape[0]
    if folds < 2 or n < folds:
        raise InsufficientDataError(f"cannot run {folds}-fold CV on {n} rows")
    assign = row_folds(n, folds, seed)

    def run(k: int) -> np.ndarray:
        train = assign != k
        model = fit(X[train], y[train], params)
        return predict(model, X[~train])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(run, range(folds)))
    else:
        outs = [run(k) for k in range(folds)]
    oof = np.empty(n)
    rmses = []
    for k, p in enumerate(outs):
        test = assign == k
        oof[test] = p
        rmses.append(float(np.sqrt(np.mean((p - y[test]) ** 2))))
    return rmses, oof, assign


def cross_validate(
    X: np.ndarray,
    y: np.ndarray,
    params: GbtParams | None = None,
    folds: int = 10,
    seed: int = 0,
    threads: int = 1,
) -> list[float]:
    """Per-fold RMSE of a seeded K-fold cross-validation."""
    return cross_validate_predictions(X, y, params, folds, seed, threads)[0]
