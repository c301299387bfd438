"""Bagged ensemble of regression trees: fitting, prediction, out-of-bag
error, hyperparameter grid search, and relative variable importance.

Each tree draws its bootstrap sample and all of its split randomness
from a substream derived from (seed, tree index), so a fitted forest is
bit-identical no matter how many worker threads built it.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import Panel
from .fileio import atomic_writer, write_csv
from .rng import substream
from .tree import (
    RegressionTree,
    TreeParams,
    fit_tree,
    node_gain,
    predict_tree,
    predict_tree_batch,
    read_tree_block,
    write_tree_block,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 500
    mtry: int = 3
    min_node_size: int = 1
    max_depth: int | None = None
    seed: int = 0
    bootstrap_size: int | None = None  # defaults to n (classic bagging)

    def tree_params(self) -> TreeParams:
        return TreeParams(self.mtry, self.min_node_size, self.max_depth)


@dataclass
class Forest:
    trees: list[RegressionTree]
    inbag_counts: np.ndarray  # (n_trees, n_rows) bootstrap multiplicities
    config: ForestConfig
    global_mean: float
    n_features: int

    @property
    def n_trees(self) -> int:
        return len(self.trees)


def _panel_arrays(panel) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(panel, Panel):
        return panel.feature_matrix(), panel.roa()
    X, y = panel
    return np.asarray(X, dtype=float), np.asarray(y, dtype=float)


def fit_forest(panel, cfg: ForestConfig, threads: int = 1) -> Forest:
    """Fit `cfg.n_trees` trees, each on its own bootstrap sample.

    `panel` is a Panel or an (X, y) pair. Trees can be built in
    parallel; the result does not depend on the thread count.
    """
    X, y = _panel_arrays(panel)
    n = X.shape[0]
    if n == 0:
        raise ValueError("cannot fit a forest on an empty panel")
    if cfg.n_trees < 1:
        raise ValueError("n_trees must be at least 1")
    if not 1 <= cfg.mtry <= X.shape[1]:
        raise ValueError(f"mtry must be in [1, {X.shape[1]}], got {cfg.mtry}")
    bootstrap_size = cfg.bootstrap_size if cfg.bootstrap_size is not None else n
    params = cfg.tree_params()

    def build(t: int) -> tuple[RegressionTree, np.ndarray]:
        rng = substream(cfg.seed, t)
        idx = rng.integers(0, n, size=bootstrap_size)
        counts = np.bincount(idx, minlength=n)
        tree = fit_tree(X[idx], y[idx], params, rng)
        return tree, counts

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            built = list(pool.map(build, range(cfg.n_trees)))
    else:
        built = [build(t) for t in range(cfg.n_trees)]
    trees = [tree for tree, _ in built]
    inbag = np.stack([counts for _, counts in built])
    return Forest(trees, inbag, cfg, float(y.mean()), X.shape[1])


def predict(forest: Forest, x) -> float:
    """Arithmetic mean of the per-tree predictions."""
    return sum(predict_tree(tree, x) for tree in forest.trees) / forest.n_trees


def predict_batch(forest: Forest, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    acc = np.zeros(X.shape[0])
    for tree in forest.trees:
        acc += predict_tree_batch(tree, X)
    return acc / forest.n_trees


def unique_inbag_fraction(forest: Forest) -> float:
    """Mean over trees of the fraction of distinct rows in the bag."""
    n = forest.inbag_counts.shape[1]
    return float((forest.inbag_counts > 0).sum(axis=1).mean() / n)


def oob_predictions(forest: Forest, panel) -> tuple[np.ndarray, np.ndarray]:
    """Per-row mean prediction over trees that did not train on the row.

    Returns (predictions, has_oob mask); rows with no out-of-bag tree
    have an undefined prediction and a False mask entry.
    """
    X, _ = _panel_arrays(panel)
    n = X.shape[0]
    if n != forest.inbag_counts.shape[1]:
        raise ValueError("panel does not match the forest's training panel size")
    acc = np.zeros(n)
    hits = np.zeros(n, dtype=np.int64)
    for t, tree in enumerate(forest.trees):
        oob = forest.inbag_counts[t] == 0
        if oob.any():
            acc[oob] += predict_tree_batch(tree, X[oob])
            hits[oob] += 1
    has = hits > 0
    preds = np.full(n, np.nan)
    preds[has] = acc[has] / hits[has]
    return preds, has


def oob_error(forest: Forest, panel, metric: str = "rmse") -> float:
    """Out-of-bag error under `metric` ("rmse" or "mae")."""
    if metric not in ("rmse", "mae"):
        raise ValueError(f"unknown metric {metric!r}")
    _, y = _panel_arrays(panel)
    preds, has = oob_predictions(forest, panel)
    if not has.any():
        raise ValueError("no row has an out-of-bag tree; grow more trees")
    if not has.all():
        logger.warning("oob_error: %d rows have no out-of-bag tree and were skipped", int((~has).sum()))
    resid = preds[has] - y[has]
    if metric == "rmse":
        return float(np.sqrt(np.mean(resid * resid)))
    return float(np.mean(np.abs(resid)))


@dataclass(frozen=True)
class TuneCell:
    mtry: int
    min_node_size: int
    error: float


@dataclass(frozen=True)
class TuneResult:
    cells: list[TuneCell]
    best: TuneCell
    metric: str


def tune_grid(panel, mtry_range, min_node_range, cfg_base: ForestConfig,
              metric: str = "rmse", threads: int = 1) -> TuneResult:
    """Out-of-bag error over the (mtry, min_node_size) grid.

    One forest per cell, all from the same base config and seed. The
    argmin cell breaks ties toward smaller mtry, then smaller
    min_node_size.
    """
    mtry_range = sorted(set(int(m) for m in mtry_range))
    min_node_range = sorted(set(int(m) for m in min_node_range))
    if not mtry_range or not min_node_range:
        raise ValueError("tuning ranges must be nonempty")
    cells: list[TuneCell] = []
    best: TuneCell | None = None
    for mtry in mtry_range:
        for min_node in min_node_range:
            cfg = replace(cfg_base, mtry=mtry, min_node_size=min_node)
            forest = fit_forest(panel, cfg, threads=threads)
            cell = TuneCell(mtry, min_node, oob_error(forest, panel, metric))
            cells.append(cell)
            if best is None or cell.error < best.error:
                best = cell
    return TuneResult(cells, best, metric)


def write_tune_grid_csv(result: TuneResult, path: str | Path) -> None:
    write_csv(path, ["mtry", "min_node_size", result.metric],
              ((c.mtry, c.min_node_size, c.error) for c in result.cells))


@dataclass(frozen=True)
class ImportanceReport:
    features: tuple[str, ...]
    raw: np.ndarray     # total SSE reduction per feature, >= 0
    scaled: np.ndarray  # [0, 100]
    scaling: str        # "minmax" or "max"


def variable_importance(forest: Forest, feature_names=None, scaling: str = "minmax") -> ImportanceReport:
    """Impurity importance: per-feature total SSE reduction over all
    splits of all trees, rescaled to [0, 100].

    "minmax" anchors the least important feature at 0 and the most
    important at 100; "max" reports each feature as a percentage of the
    most important one. If all raw importances are equal the scaled
    scores are all set to 100 (and a warning is logged).
    """
    if scaling not in ("minmax", "max"):
        raise ValueError(f"unknown importance scaling {scaling!r}")
    raw = np.zeros(forest.n_features)
    for tree in forest.trees:
        for node in tree.nodes:
            if node.split_feature is not None:
                raw[node.split_feature] += node_gain(tree, node)
    if feature_names is None:
        feature_names = tuple(f"feature_{i}" for i in range(forest.n_features))
    spread = raw.max() - raw.min()
    if scaling == "minmax":
        if spread == 0.0:
            logger.warning("variable_importance: all raw importances equal; scaled scores set to 100")
            scaled = np.full_like(raw, 100.0)
        else:
            scaled = 100.0 * (raw - raw.min()) / spread
    else:
        if raw.max() == 0.0:
            logger.warning("variable_importance: all raw importances zero; scaled scores set to 100")
            scaled = np.full_like(raw, 100.0)
        else:
            scaled = 100.0 * raw / raw.max()
    return ImportanceReport(tuple(feature_names), raw, scaled, scaling)


def write_importance_csv(report: ImportanceReport, path: str | Path) -> None:
    order = np.argsort(-report.raw, kind="stable")
    write_csv(path, ["feature", "raw_importance", "scaled_score"],
              ((report.features[i], float(report.raw[i]), float(report.scaled[i])) for i in order))


# ---------------------------------------------------------------------------
# Serialization: config header, per-tree in-bag counts, concatenated trees.


def save_forest(forest: Forest, path: str | Path) -> None:
    with atomic_writer(path) as fh:
        cfg = forest.config
        fh.write("random-forest v1\n")
        fh.write(f"n_trees {forest.n_trees}\n")
        fh.write(f"mtry {cfg.mtry}\n")
        fh.write(f"min_node_size {cfg.min_node_size}\n")
        fh.write(f"max_depth {'-' if cfg.max_depth is None else cfg.max_depth}\n")
        fh.write(f"seed {cfg.seed}\n")
        fh.write(f"bootstrap_size {'-' if cfg.bootstrap_size is None else cfg.bootstrap_size}\n")
        fh.write(f"global_mean {forest.global_mean!r}\n")
        fh.write(f"n_rows {forest.inbag_counts.shape[1]}\n")
        fh.write(f"n_features {forest.n_features}\n")
        for t in range(forest.n_trees):
            counts = " ".join(str(int(c)) for c in forest.inbag_counts[t])
            fh.write(f"inbag {t} {counts}\n")
        for t, tree in enumerate(forest.trees):
            fh.write(f"tree {t}\n")
            write_tree_block(tree, fh)


def load_forest(path: str | Path) -> Forest:
    with open(path, encoding="utf-8") as fh:
        lines = iter(fh)

        def expect(prefix: str) -> str:
            line = next(lines).strip()
            if not line.startswith(prefix):
                raise ValueError(f"malformed forest file: expected {prefix!r}, got {line!r}")
            return line[len(prefix):].strip()

        if next(lines).strip() != "random-forest v1":
            raise ValueError("malformed forest file: bad header")
        n_trees = int(expect("n_trees"))
        mtry = int(expect("mtry"))
        min_node_size = int(expect("min_node_size"))
        max_depth_s = expect("max_depth")
        seed = int(expect("seed"))
        bootstrap_s = expect("bootstrap_size")
        global_mean = float(expect("global_mean"))
        n_rows = int(expect("n_rows"))
        n_features = int(expect("n_features"))
        inbag = np.zeros((n_trees, n_rows), dtype=np.int64)
        for _ in range(n_trees):
            parts = expect("inbag").split()
            inbag[int(parts[0])] = [int(c) for c in parts[1:]]
        trees: list[RegressionTree | None] = [None] * n_trees
        for _ in range(n_trees):
            t = int(expect("tree"))
            trees[t] = read_tree_block(lines)
    cfg = ForestConfig(
        n_trees=n_trees,
        mtry=mtry,
        min_node_size=min_node_size,
        max_depth=None if max_depth_s == "-" else int(max_depth_s),
        seed=seed,
        bootstrap_size=None if bootstrap_s == "-" else int(bootstrap_s),
    )
    return Forest(list(trees), inbag, cfg, global_mean, n_features)
