"""Exact interventional Shapley values for boosted tree ensembles.

The value of a coalition ``S`` for instance ``x`` is the mean model output over
background rows ``b`` with the features in ``S`` replaced by ``x``'s values.
Shapley values are additive over trees, and a tree's game only involves the
features it splits on, so each tree is solved by enumerating the coalitions of
its own features. Inside a tree the coalition value is evaluated leaf by leaf:
a hybrid row reaches a leaf iff ``x`` agrees with the path on the coalition's
split nodes and ``b`` agrees on the rest.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyInputError, FeatureBudgetError, ShapeError
from .gbt import GbtModel, Tree, predict

__all__ = [
    "MAX_FEATURES",
    "ShapExplanation",
    "GlobalImportance",
    "shapley_exact",
    "explain",
    "global_importance",
    "write_explanations_csv",
    "write_importance_csv",
]

MAX_FEATURES = 20


@dataclass
class ShapExplanation:
    feature_names: list[str]
    baseline: float
    values: np.ndarray
    prediction: float
    features: np.ndarray | None = None

    @property
    def residual(self) -> float:
        return self.baseline + float(np.sum(self.values)) - self.prediction


@dataclass
class GlobalImportance:
    feature_names: list[str]
    mean_abs_shap: np.ndarray
    rank: np.ndarray  # 1 = most important

    def ranking(self) -> list[tuple[str, float]]:
        order = np.argsort(self.rank)
        return [(self.feature_names[i], float(self.mean_abs_shap[i])) for i in order]

    def top(self, k: int) -> list[str]:
        return [name for name, _ in self.ranking()[:k]]


def _leaf_paths(tree: Tree) -> list[tuple[int, list[int], list[bool]]]:
    """(leaf, path nodes, went-left flags) for every leaf."""
    out = []
    stack: list[tuple[int, list[int], list[bool]]] = [(0, [], [])]
    while stack:
        node, nodes, dirs = stack.pop()
        if tree.feature[node] < 0:
            out.append((node, nodes, dirs))
        else:
            stack.append((int(tree.right[node]), nodes + [node], dirs + [False]))
            stack.append((int(tree.left[node]), nodes + [node], dirs + [True]))
    return out


def _coalition_weights(k: int) -> np.ndarray:
    return np.array([math.factorial(s) * math.factorial(k - s - 1) / math.factorial(k) for s in range(k)])


def _tree_shap(tree: Tree, X: np.ndarray, background: np.ndarray) -> tuple[np.ndarray, float]:
    """Shapley values of one tree's raw output; returns (phi (N x M), v(empty))."""
    N, M = X.shape
    phi = np.zeros((N, M))
    if tree.feature[0] < 0:
        return phi, float(tree.value[0])
    feats = tree.used_features()
    k = len(feats)
    local = {f: i for i, f in enumerate(feats)}
    n_coal = 1 << k
    coal = np.arange(n_coal)

    inner = np.flatnonzero(tree.feature >= 0)
    thr = tree.threshold[inner]
    col = tree.feature[inner]
    pos = np.empty(tree.n_nodes, dtype=np.int64)
    pos[inner] = np.arange(inner.size)
    left_x = X[:, col] < thr
    left_b = background[:, col] < thr

    v = np.zeros((N, n_coal))
    for leaf, nodes, dirs in _leaf_paths(tree):
        p = pos[nodes]
        want = np.array(dirs)
        mx = left_x[:, p] == want
        mb = left_b[:, p] == want
        path_feats = sorted({local[int(tree.feature[nd])] for nd in nodes})
        node_slot = np.array([path_feats.index(local[int(tree.feature[nd])]) for nd in nodes])
        n_pat = 1 << len(path_feats)
        P = np.empty(n_pat)
        Q = np.empty((N, n_pat))
        for s in range(n_pat):
            in_s = (s >> node_slot) & 1 == 1
            P[s] = np.mean(np.all(mb[:, ~in_s], axis=1))
            Q[:, s] = np.all(mx[:, in_s], axis=1)
        # project every coalition onto this leaf's path features
        pattern = np.zeros(n_coal, dtype=np.int64)
        for slot, lf in enumerate(path_feats):
            pattern |= ((coal >> lf) & 1) << slot
        v += tree.value[leaf] * (P[pattern] * Q[:, pattern])

    w = _coalition_weights(k)
    sizes = np.array([bin(c).count("1") for c in range(n_coal)])
    for i, f in enumerate(feats):
        without = coal[(coal >> i) & 1 == 0]
        phi[:, f] = (v[:, without | (1 << i)] - v[:, without]) @ w[sizes[without]]
    return phi, float(v[0, 0])


def explain(model: GbtModel, X: np.ndarray, background: np.ndarray) -> list[ShapExplanation]:
    """Exact Shapley explanations for every row of ``X``.

    Raises:
        FeatureBudgetError: the model has more than ``MAX_FEATURES`` features.
        ShapeError: column counts disagree or the background is empty.
    """
    M = model.n_features
    if M > MAX_FEATURES:
        raise FeatureBudgetError(
            f"{M} features exceeds the exact-enumeration budget of {MAX_FEATURES}; reduce the feature count"
        )
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    if X.shape[1] != M or background.shape[1] != M:
        raise ShapeError(f"model has {M} features; got X {X.shape} and background {background.shape}")
    if background.shape[0] == 0:
        raise ShapeError("background must contain at least one row")

    eta = model.params.learning_rate
    phi = np.zeros(X.shape)
    baseline = model.base_score
    for tree in model.trees:
        t_phi, t_base = _tree_shap(tree, X, background)
        phi += eta * t_phi
        baseline += eta * t_base
    preds = predict(model, X)
    return [ShapExplanation(list(model.feature_names), float(baseline), phi[i], float(preds[i]), X[i].copy())
            for i in range(X.shape[0])]


def shapley_exact(model: GbtModel, x: np.ndarray, background: np.ndarray) -> ShapExplanation:
    """Exact Shapley explanation of one instance against a background sample."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("x must be a single instance vector")
    return explain(model, x[None, :], background)[0]


def global_importance(explanations: Sequence[ShapExplanation]) -> GlobalImportance:
    """Mean absolute Shapley value per feature, ranked.

    Ranks follow decreasing mean |phi|; ties are ordered by feature name.
    """
    if not explanations:
        raise EmptyInputError("no explanations given")
    names = list(explanations[0].feature_names)
    for e in explanations:
        if list(e.feature_names) != names or len(e.values) != len(names):
            raise ShapeError("explanations disagree on feature names")
    mean_abs = np.mean(np.abs(np.array([e.values for e in explanations])), axis=0)
    order = sorted(range(len(names)), key=lambda i: (-mean_abs[i], names[i]))
    rank = np.empty(len(names), dtype=np.int64)
    rank[order] = np.arange(1, len(names) + 1)
    return GlobalImportance(names, mean_abs, rank)


def write_explanations_csv(explanations: Sequence[ShapExplanation], path: str | Path,
                           instance_ids: Sequence | None = None) -> None:
    """One row per (instance, feature), the data behind a summary plot."""
    ids = list(instance_ids) if instance_ids is not None else list(range(len(explanations)))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance_id", "feature", "feature_value", "shap_value", "baseline", "prediction"])
        for iid, e in zip(ids, explanations):
            for j, name in enumerate(e.feature_names):
                fv = "" if e.features is None else repr(float(e.features[j]))
                w.writerow([iid, name, fv, repr(float(e.values[j])), repr(e.baseline), repr(e.prediction)])


def write_importance_csv(rankings: dict[str, GlobalImportance], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "rank", "feature", "mean_abs_shap"])
        for group, imp in rankings.items():
            for r, (name, val) in enumerate(imp.ranking(), start=1):
                w.writerow([group, r, name, repr(val)])
