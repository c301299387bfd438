"""Comparative model harness: random forest vs k-nearest neighbors vs
least-squares gradient boosting vs a restricted single tree, scored by
RMSE, MAE, and R-squared.

The default evaluation is in-sample, which flatters interpolating
models; a prominent warning is logged and holdout / cross-validation
modes are available.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .data import Panel
from .fileio import atomic_writer, fmt
from .forest import Forest, ForestConfig, fit_forest, predict_batch
from .rng import substream
from .tree import RegressionTree, TreeParams, fit_tree, predict_tree_batch

logger = logging.getLogger(__name__)

MODEL_NAMES = ("rf", "knn", "gb", "cart")
CART_MIN_NODE_GRID = (5, 10, 20, 50, 100)


# ---------------------------------------------------------------------------
# k-nearest neighbors


def _standardizer(X: np.ndarray):
    """Training mean/sd plus a keep-mask excluding zero-variance features."""
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    keep = sd > 0
    if not keep.all():
        logger.info("knn: excluding %d zero-variance features from the distance", int((~keep).sum()))
    if not keep.any():
        raise ValueError("all features have zero variance; knn distance undefined")
    return mean[keep], sd[keep], keep


def knn_predict_batch(train, Xq, k: int = 5) -> np.ndarray:
    """Mean response of the k nearest training rows (standardized
    Euclidean distance; ties broken by training order)."""
    Xt, yt = train if not isinstance(train, Panel) else (train.feature_matrix(), train.roa())
    Xt = np.asarray(Xt, dtype=float)
    yt = np.asarray(yt, dtype=float)
    Xq = np.asarray(Xq, dtype=float)
    if Xq.ndim == 1:
        Xq = Xq.reshape(1, -1)
    n = Xt.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    mean, sd, keep = _standardizer(Xt)
    Zt = (Xt[:, keep] - mean) / sd
    Zq = (Xq[:, keep] - mean) / sd
    d2 = (np.einsum("ij,ij->i", Zq, Zq)[:, None]
          + np.einsum("ij,ij->i", Zt, Zt)[None, :]
          - 2.0 * (Zq @ Zt.T))
    np.maximum(d2, 0.0, out=d2)
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return yt[nearest].mean(axis=1)


def knn_predict(train, x, k: int = 5) -> float:
    return float(knn_predict_batch(train, np.asarray(x, dtype=float).reshape(1, -1), k)[0])


# ---------------------------------------------------------------------------
# Gradient boosting


@dataclass(frozen=True)
class GBConfig:
    n_stages: int = 200
    shrinkage: float = 0.1
    tree_depth: int | None = 3
    min_node_size: int = 1
    seed: int = 0


@dataclass
class GBModel:
    intercept: float
    trees: list[RegressionTree]
    shrinkage: float
    train_rmse_path: list[float]  # rmse after 0, 1, ..., n_stages stages


def fit_gb(panel, cfg: GBConfig) -> GBModel:
    """Least-squares boosting: start from the mean response, then add
    shrunken depth-limited trees fitted to the current residuals."""
    Xt, yt = panel if not isinstance(panel, Panel) else (panel.feature_matrix(), panel.roa())
    Xt = np.asarray(Xt, dtype=float)
    yt = np.asarray(yt, dtype=float)
    if Xt.shape[0] == 0:
        raise ValueError("cannot boost on an empty panel")
    n_features = Xt.shape[1]
    intercept = float(yt.mean())
    current = np.full(yt.shape[0], intercept)
    path = [float(np.sqrt(np.mean((yt - current) ** 2)))]
    trees: list[RegressionTree] = []
    params = TreeParams(mtry=n_features, min_node_size=cfg.min_node_size, max_depth=cfg.tree_depth)
    for stage in range(cfg.n_stages):
        residual = yt - current
        tree = fit_tree(Xt, residual, params, substream(cfg.seed, "gb", stage))
        trees.append(tree)
        current = current + cfg.shrinkage * predict_tree_batch(tree, Xt)
        path.append(float(np.sqrt(np.mean((yt - current) ** 2))))
    return GBModel(intercept, trees, cfg.shrinkage, path)


def gb_predict_batch(model: GBModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    acc = np.full(X.shape[0], model.intercept)
    for tree in model.trees:
        acc += model.shrinkage * predict_tree_batch(tree, X)
    return acc


# ---------------------------------------------------------------------------
# Restricted single tree


def tune_cart_min_node(X, y, seed: int, grid=CART_MIN_NODE_GRID, n_folds: int = 5) -> int:
    """Pick min_node_size for the single-tree comparator by k-fold CV.

    An unrestricted tree memorizes the sample, which would make the
    in-sample comparison vacuous; CV chooses a restriction instead.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    candidates = [m for m in grid if 2 * m <= n] or [max(1, n // 4)]
    order = substream(seed, "cartcv").permutation(n)
    folds = np.array_split(order, n_folds)
    best_m, best_err = None, math.inf
    for m in candidates:
        sse = 0.0
        for f, test_idx in enumerate(folds):
            if test_idx.size == 0:
                continue
            train_mask = np.ones(n, dtype=bool)
            train_mask[test_idx] = False
            params = TreeParams(mtry=X.shape[1], min_node_size=m)
            tree = fit_tree(X[train_mask], y[train_mask], params, substream(seed, "cartcv", f))
            pred = predict_tree_batch(tree, X[test_idx])
            sse += float(((pred - y[test_idx]) ** 2).sum())
        err = math.sqrt(sse / n)
        if err < best_err:
            best_err, best_m = err, m
    assert best_m is not None
    return best_m


# ---------------------------------------------------------------------------
# Harness


@dataclass(frozen=True)
class ModelScore:
    rmse: float
    mae: float
    r_squared: float | None  # None when the evaluation SST is zero


@dataclass
class BenchResult:
    scores: dict[str, ModelScore]
    mode: str
    settings: dict[str, dict]


def _score(actual: np.ndarray, pred: np.ndarray) -> ModelScore:
    resid = pred - actual
    rmse = float(np.sqrt(np.mean(resid * resid)))
    mae = float(np.mean(np.abs(resid)))
    sst = float(((actual - actual.mean()) ** 2).sum())
    if sst == 0.0:
        return ModelScore(rmse, mae, None)
    sse = float((resid * resid).sum())
    return ModelScore(rmse, mae, 1.0 - sse / sst)


def _fit_and_predict(name: str, Xtr, ytr, Xev, seed: int, rf_cfg: ForestConfig,
                     knn_k: int, gb_cfg: GBConfig, threads: int) -> tuple[np.ndarray, dict]:
    if name == "rf":
        forest = fit_forest((Xtr, ytr), rf_cfg, threads=threads)
        return predict_batch(forest, Xev), {
            "n_trees": rf_cfg.n_trees, "mtry": rf_cfg.mtry,
            "min_node_size": rf_cfg.min_node_size, "seed": rf_cfg.seed,
        }
    if name == "knn":
        return knn_predict_batch((Xtr, ytr), Xev, knn_k), {"k": knn_k}
    if name == "gb":
        model = fit_gb((Xtr, ytr), gb_cfg)
        return gb_predict_batch(model, Xev), {
            "n_stages": gb_cfg.n_stages, "shrinkage": gb_cfg.shrinkage,
            "tree_depth": gb_cfg.tree_depth, "seed": gb_cfg.seed,
        }
    if name == "cart":
        min_node = tune_cart_min_node(Xtr, ytr, seed)
        params = TreeParams(mtry=Xtr.shape[1], min_node_size=min_node)
        tree = fit_tree(Xtr, ytr, params, substream(seed, "cart"))
        return predict_tree_batch(tree, Xev), {"min_node_size": min_node, "restriction": "5-fold CV"}
    raise ValueError(f"unknown benchmark model {name!r}")


def run_benchmark(panel, models=MODEL_NAMES, mode: str = "in_sample", seed: int = 0,
                  rf_cfg: ForestConfig | None = None, knn_k: int = 5,
                  gb_cfg: GBConfig | None = None, threads: int = 1) -> BenchResult:
    """Score the comparators under one evaluation mode.

    Modes: "in_sample" (train = evaluation set), "holdout" (80/20
    split), "cv" (5-fold out-of-fold predictions).
    """
    X, y = panel if not isinstance(panel, Panel) else (panel.feature_matrix(), panel.roa())
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    rf_cfg = rf_cfg if rf_cfg is not None else ForestConfig(n_trees=100, seed=seed)
    gb_cfg = gb_cfg if gb_cfg is not None else GBConfig(seed=seed)
    scores: dict[str, ModelScore] = {}
    settings: dict[str, dict] = {}
    if mode == "in_sample":
        logger.warning(
            "benchmark mode 'in_sample': training and evaluation sets coincide; "
            "flexible models are flattered. Use 'holdout' or 'cv' for generalization error."
        )
        for name in models:
            pred, info = _fit_and_predict(name, X, y, X, seed, rf_cfg, knn_k, gb_cfg, threads)
            scores[name] = _score(y, pred)
            settings[name] = info
    elif mode == "holdout":
        if n < 10:
            raise ValueError("holdout mode needs at least 10 records")
        order = substream(seed, "split").permutation(n)
        cut = int(round(0.8 * n))
        train_idx, test_idx = order[:cut], order[cut:]
        for name in models:
            pred, info = _fit_and_predict(name, X[train_idx], y[train_idx], X[test_idx],
                                          seed, rf_cfg, knn_k, gb_cfg, threads)
            scores[name] = _score(y[test_idx], pred)
            settings[name] = info
    elif mode == "cv":
        if n < 25:
            raise ValueError("cv mode needs at least 25 records")
        order = substream(seed, "split").permutation(n)
        folds = np.array_split(order, 5)
        for name in models:
            pred = np.empty(n)
            info: dict = {}
            for test_idx in folds:
                train_mask = np.ones(n, dtype=bool)
                train_mask[test_idx] = False
                fold_pred, info = _fit_and_predict(name, X[train_mask], y[train_mask], X[test_idx],
                                                   seed, rf_cfg, knn_k, gb_cfg, threads)
                pred[test_idx] = fold_pred
            scores[name] = _score(y, pred)
            settings[name] = info
    else:
        raise ValueError(f"unknown benchmark mode {mode!r}")
    return BenchResult(scores, mode, settings)


def write_table2_csv(result: BenchResult, path) -> None:
    """Model comparison table; comparator settings are surfaced in
    leading comment lines."""
    with atomic_writer(path) as fh:
        for name in result.scores:
            fh.write(f"# {name}: {json.dumps(result.settings.get(name, {}), sort_keys=True)}\n")
        fh.write("model,rmse,mae,r_squared,mode\n")
        for name, score in result.scores.items():
            r2 = "" if score.r_squared is None else fmt(score.r_squared)
            fh.write(f"{name},{fmt(score.rmse)},{fmt(score.mae)},{r2},{result.mode}\n")
