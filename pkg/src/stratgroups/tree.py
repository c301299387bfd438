"""Regression CART: variance-reduction splitting with random feature
subsampling, midpoint thresholds, and a minimum-child-size stopping rule.

Split search maximizes SSE(parent) - SSE(left) - SSE(right), computed
stably as n_l * n_r / n * (mean_l - mean_r)^2. Candidate thresholds are
midpoints between consecutive distinct sorted values, which makes split
partitions depend only on value ranks. Routing is "<= goes left"
everywhere. Ties between equal-gain splits break toward the lowest
feature index, then the lowest threshold, so fitting is deterministic
for a given random stream.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fileio import atomic_writer

INTERNAL = "internal"
LEAF = "leaf"


@dataclass
class TreeNode:
    node_id: int
    kind: str
    node_mean: float
    node_count: int
    split_feature: int | None = None
    split_threshold: float | None = None
    left_child: int | None = None
    right_child: int | None = None


@dataclass(frozen=True)
class TreeParams:
    mtry: int
    min_node_size: int = 1
    max_depth: int | None = None


class RegressionTree:
    """Fitted tree. Nodes are indexed by id; node 0 is the root.
    Immutable once fitted; safe to share across threads."""

    def __init__(self, nodes: list[TreeNode], root_id: int, n_features: int):
        self.nodes = nodes
        self.root_id = root_id
        self.n_features = n_features
        self._arrays: tuple | None = None

    def arrays(self):
        """Columnar node table (feature, threshold, left, right, mean,
        count, is_leaf) for vectorized routing."""
        if self._arrays is None:
            n = len(self.nodes)
            feat = np.full(n, -1, dtype=np.int64)
            thr = np.full(n, np.nan)
            left = np.full(n, -1, dtype=np.int64)
            right = np.full(n, -1, dtype=np.int64)
            mean = np.empty(n)
            count = np.empty(n, dtype=np.int64)
            is_leaf = np.zeros(n, dtype=bool)
            for node in self.nodes:
                i = node.node_id
                mean[i] = node.node_mean
                count[i] = node.node_count
                if node.kind == LEAF:
                    is_leaf[i] = True
                else:
                    feat[i] = node.split_feature
                    thr[i] = node.split_threshold
                    left[i] = node.left_child
                    right[i] = node.right_child
            self._arrays = (feat, thr, left, right, mean, count, is_leaf)
        return self._arrays

    def depth(self) -> int:
        depth = {self.root_id: 0}
        best = 0
        for node in self.nodes:  # parents precede children in build order
            d = depth[node.node_id]
            best = max(best, d)
            if node.kind == INTERNAL:
                depth[node.left_child] = d + 1
                depth[node.right_child] = d + 1
        return best

    def n_leaves(self) -> int:
        return sum(1 for n in self.nodes if n.kind == LEAF)


def _best_split(X, y_node, idx, params, feats, total):
    """Best (gain, feature, threshold) among candidate features, or None."""
    n = idx.size
    m = params.min_node_size
    best_gain = 0.0
    best = None
    for f in feats:
        v = X[idx, f]
        order = np.argsort(v, kind="stable")
        sv = v[order]
        if sv[0] == sv[-1]:
            continue
        sy = y_node[order]
        csum = np.cumsum(sy)
        cut = np.nonzero(sv[:-1] < sv[1:])[0]
        cut = cut[(cut >= m - 1) & (cut <= n - m - 1)]
        if cut.size == 0:
            continue
        n_left = (cut + 1).astype(float)
        n_right = n - n_left
        sum_left = csum[cut]
        diff = sum_left / n_left - (total - sum_left) / n_right
        gains = (n_left * n_right / n) * diff * diff
        j = int(np.argmax(gains))  # first max = lowest threshold
        gain = float(gains[j])
        if gain > best_gain:
            best_gain = gain
            best = (gain, int(f), float(0.5 * (sv[cut[j]] + sv[cut[j] + 1])))
    return best


def fit_tree(X, y, params: TreeParams, rng: np.random.Generator) -> RegressionTree:
    """Grow a tree on (X, y) with an mtry-sized random feature subset
    per node. A node becomes a leaf when it cannot produce two children
    of at least min_node_size rows, its responses are constant, or no
    sampled feature admits a positive-gain split."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    n, n_features = X.shape
    if n == 0:
        raise ValueError("cannot fit a tree on an empty sample")
    if y.shape[0] != n:
        raise ValueError("feature/response length mismatch")
    if not np.isfinite(y).all():
        raise ValueError("non-finite response values")
    if not 1 <= params.mtry <= n_features:
        raise ValueError(f"mtry must be in [1, {n_features}], got {params.mtry}")
    if params.min_node_size < 1:
        raise ValueError("min_node_size must be at least 1")

    nodes: list[TreeNode] = []
    # Explicit stack (right pushed first, left processed first) keeps ids
    # in preorder and avoids recursion limits on deep trees.
    stack: list[tuple[np.ndarray, int, int, bool]] = [(np.arange(n), 0, -1, False)]
    while stack:
        idx, depth, parent, is_left = stack.pop()
        y_node = y[idx]
        count = idx.size
        total = float(y_node.sum())
        node_id = len(nodes)
        node = TreeNode(node_id, LEAF, total / count, count)
        nodes.append(node)
        if parent >= 0:
            if is_left:
                nodes[parent].left_child = node_id
            else:
                nodes[parent].right_child = node_id
        if params.max_depth is not None and depth >= params.max_depth:
            continue
        if count < 2 * params.min_node_size:
            continue
        if np.all(y_node == y_node[0]):
            continue
        feats = np.sort(rng.choice(n_features, size=params.mtry, replace=False))
        split = _best_split(X, y_node, idx, params, feats, total)
        if split is None:
            continue
        _, feature, threshold = split
        node.kind = INTERNAL
        node.split_feature = feature
        node.split_threshold = threshold
        mask = X[idx, feature] <= threshold
        stack.append((idx[~mask], depth + 1, node_id, False))
        stack.append((idx[mask], depth + 1, node_id, True))
    return RegressionTree(nodes, 0, n_features)


def _check_vector(tree: RegressionTree, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (tree.n_features,):
        raise ValueError(f"expected a length-{tree.n_features} feature vector, got shape {x.shape}")
    return x


def decision_path(tree: RegressionTree, x) -> list[int]:
    """Node ids from the root to the leaf that `x` reaches."""
    x = _check_vector(tree, x)
    node = tree.nodes[tree.root_id]
    path = [node.node_id]
    while node.kind == INTERNAL:
        if x[node.split_feature] <= node.split_threshold:
            node = tree.nodes[node.left_child]
        else:
            node = tree.nodes[node.right_child]
        path.append(node.node_id)
    return path


def predict_tree(tree: RegressionTree, x) -> float:
    return tree.nodes[decision_path(tree, x)[-1]].node_mean


def leaf_ids_batch(tree: RegressionTree, X: np.ndarray) -> np.ndarray:
    """Leaf node id per row of X, routed vectorized."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != tree.n_features:
        raise ValueError(f"expected (n, {tree.n_features}) feature matrix, got shape {X.shape}")
    feat, thr, left, right, _, _, is_leaf = tree.arrays()
    cur = np.full(X.shape[0], tree.root_id, dtype=np.int64)
    active = ~is_leaf[cur]
    while active.any():
        rows = np.nonzero(active)[0]
        at = cur[rows]
        go_left = X[rows, feat[at]] <= thr[at]
        nxt = np.where(go_left, left[at], right[at])
        cur[rows] = nxt
        active[rows] = ~is_leaf[nxt]
    return cur


def predict_tree_batch(tree: RegressionTree, X: np.ndarray) -> np.ndarray:
    mean = tree.arrays()[4]
    return mean[leaf_ids_batch(tree, X)]


def node_gain(tree: RegressionTree, node: TreeNode) -> float:
    """SSE reduction achieved by an internal node's split, recovered
    from child means and counts:  n_l n_r / n * (mean_l - mean_r)^2."""
    if node.kind != INTERNAL:
        return 0.0
    left = tree.nodes[node.left_child]
    right = tree.nodes[node.right_child]
    diff = left.node_mean - right.node_mean
    return left.node_count * right.node_count / node.node_count * diff * diff


# ---------------------------------------------------------------------------
# Serialization: a self-describing node table, exact float round-trip.

_NA = "-"


def write_tree_block(tree: RegressionTree, fh) -> None:
    fh.write("regression-tree v1\n")
    fh.write(f"n_features {tree.n_features}\n")
    fh.write(f"root {tree.root_id}\n")
    fh.write(f"nodes {len(tree.nodes)}\n")
    fh.write("id kind feature threshold left right mean count\n")
    for node in tree.nodes:
        if node.kind == INTERNAL:
            cols = [node.node_id, node.kind, node.split_feature, repr(node.split_threshold),
                    node.left_child, node.right_child, repr(node.node_mean), node.node_count]
        else:
            cols = [node.node_id, node.kind, _NA, _NA, _NA, _NA, repr(node.node_mean), node.node_count]
        fh.write(" ".join(str(c) for c in cols) + "\n")


def read_tree_block(lines) -> RegressionTree:
    """Parse one tree block from an iterator of lines."""
    def expect(prefix: str) -> str:
        line = next(lines).strip()
        if not line.startswith(prefix):
            raise ValueError(f"malformed tree file: expected {prefix!r}, got {line!r}")
        return line[len(prefix):].strip()

    header = next(lines).strip()
    if header != "regression-tree v1":
        raise ValueError(f"malformed tree file: unexpected header {header!r}")
    n_features = int(expect("n_features"))
    root_id = int(expect("root"))
    n_nodes = int(expect("nodes"))
    expect("id kind feature threshold left right mean count")
    nodes: list[TreeNode] = []
    for _ in range(n_nodes):
        parts = next(lines).split()
        if len(parts) != 8:
            raise ValueError(f"malformed node row: {parts!r}")
        node_id, kind = int(parts[0]), parts[1]
        if kind == INTERNAL:
            node = TreeNode(node_id, kind, float(parts[6]), int(parts[7]),
                            split_feature=int(parts[2]), split_threshold=float(parts[3]),
                            left_child=int(parts[4]), right_child=int(parts[5]))
        elif kind == LEAF:
            node = TreeNode(node_id, kind, float(parts[6]), int(parts[7]))
        else:
            raise ValueError(f"unknown node kind {kind!r}")
        nodes.append(node)
    nodes.sort(key=lambda n: n.node_id)
    return RegressionTree(nodes, root_id, n_features)


def save_tree(tree: RegressionTree, path: str | Path) -> None:
    with atomic_writer(path) as fh:
        write_tree_block(tree, fh)


def load_tree(path: str | Path) -> RegressionTree:
    with open(path, encoding="utf-8") as fh:
        return read_tree_block(iter(fh))
