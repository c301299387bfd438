"""Additive prediction decomposition.

Every prediction is expressed as a bias (the root-node mean) plus one
contribution per predictor. Walking a decision path, each step's change
in node mean is credited to the feature the parent split on; summing
the steps telescopes back to the leaf prediction, so

    bias + sum(contributions) == prediction

holds per tree up to float accumulation. Forest-level vectors are the
per-tree averages, which preserves the identity against the forest
prediction.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fileio import write_csv
from .forest import Forest
from .tree import RegressionTree, _check_vector

KEY_FIELDS = ("bank_id", "year")


@dataclass(frozen=True)
class ContributionVector:
    bias: float
    contributions: np.ndarray  # one entry per predictor, response units
    record_key: tuple[str, int] | None = None

    @property
    def prediction(self) -> float:
        return self.bias + float(self.contributions.sum())


def _decompose_batch(tree: RegressionTree, X: np.ndarray):
    """(bias, contributions (n, K), leaf predictions (n,)) for a row batch."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != tree.n_features:
        raise ValueError(f"expected (n, {tree.n_features}) feature matrix, got shape {X.shape}")
    feat, thr, left, right, mean, _, is_leaf = tree.arrays()
    n = X.shape[0]
    contrib = np.zeros((n, tree.n_features))
    cur = np.full(n, tree.root_id, dtype=np.int64)
    active = ~is_leaf[cur]
    while active.any():
        rows = np.nonzero(active)[0]
        at = cur[rows]
        f = feat[at]
        go_left = X[rows, f] <= thr[at]
        nxt = np.where(go_left, left[at], right[at])
        np.add.at(contrib, (rows, f), mean[nxt] - mean[at])
        cur[rows] = nxt
        active[rows] = ~is_leaf[nxt]
    return float(mean[tree.root_id]), contrib, mean[cur]


def decompose(tree: RegressionTree, x, record_key=None) -> ContributionVector:
    """Single-tree decomposition of one prediction."""
    x = _check_vector(tree, x)
    _, contrib, _ = _decompose_batch(tree, x.reshape(1, -1))
    return ContributionVector(tree.nodes[tree.root_id].node_mean, contrib[0], record_key)


def decompose_forest(forest: Forest, x, record_key=None) -> ContributionVector:
    """Forest decomposition: mean of the per-tree biases and the
    elementwise mean of per-tree contributions."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    bias_sum = 0.0
    contrib_sum = np.zeros(forest.n_features)
    for tree in forest.trees:
        bias, contrib, _ = _decompose_batch(tree, x)
        bias_sum += bias
        contrib_sum += contrib[0]
    t = forest.n_trees
    return ContributionVector(bias_sum / t, contrib_sum / t, record_key)


@dataclass
class ContributionMatrix:
    keys: list[tuple[str, int]]
    feature_names: tuple[str, ...]
    bias: np.ndarray           # (n,) forest bias per record (constant)
    contributions: np.ndarray  # (n, K)
    predictions: np.ndarray    # (n,) forest predictions
    actual: np.ndarray         # (n,) observed response

    def __len__(self) -> int:
        return len(self.keys)

    def implied_predictions(self) -> np.ndarray:
        return self.bias + self.contributions.sum(axis=1)

    def row(self, i: int) -> ContributionVector:
        return ContributionVector(float(self.bias[i]), self.contributions[i], self.keys[i])


def contribution_matrix(forest: Forest, panel) -> ContributionMatrix:
    """Decompose every record of a panel. This matrix is the clustering
    input; rows carry (bank_id, year) keys."""
    X = panel.feature_matrix()
    y = panel.roa()
    n = X.shape[0]
    bias_sum = 0.0
    contrib_sum = np.zeros((n, forest.n_features))
    pred_sum = np.zeros(n)
    for tree in forest.trees:
        bias, contrib, leaf_pred = _decompose_batch(tree, X)
        bias_sum += bias
        contrib_sum += contrib
        pred_sum += leaf_pred
    t = forest.n_trees
    bias = np.full(n, bias_sum / t)
    return ContributionMatrix(
        keys=panel.keys(),
        feature_names=panel.feature_names,
        bias=bias,
        contributions=contrib_sum / t,
        predictions=pred_sum / t,
        actual=y.copy(),
    )


def write_contributions_csv(matrix: ContributionMatrix, path: str | Path) -> None:
    header = [*KEY_FIELDS, "bias", *matrix.feature_names, "prediction", "actual"]
    rows = (
        [bank, year, float(matrix.bias[i]), *map(float, matrix.contributions[i]),
         float(matrix.predictions[i]), float(matrix.actual[i])]
        for i, (bank, year) in enumerate(matrix.keys)
    )
    write_csv(path, header, rows)


def read_contributions_csv(path: str | Path) -> ContributionMatrix:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["bank_id", "year", "bias"] or header[-2:] != ["prediction", "actual"]:
            raise ValueError(f"unexpected contribution matrix header in {path}")
        feature_names = tuple(header[3:-2])
        keys: list[tuple[str, int]] = []
        rows: list[list[float]] = []
        for parts in reader:
            keys.append((parts[0], int(parts[1])))
            rows.append([float(v) for v in parts[2:]])
    if not rows:
        raise ValueError(f"empty contribution matrix: {path}")
    data = np.asarray(rows)
    return ContributionMatrix(
        keys=keys,
        feature_names=feature_names,
        bias=data[:, 0],
        contributions=data[:, 1:-2],
        predictions=data[:, -2],
        actual=data[:, -1],
    )
