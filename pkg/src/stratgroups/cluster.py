"""K-means with multi-start best fit and majority-rule selection of the
cluster count.

Lloyd iterations over squared Euclidean distance; each start draws its
initial centroids from a substream of (seed, start index), and the
reported solution is the completed start with the lowest inertia, so
results do not depend on scheduling. Cluster-count selection runs five
validity indices over a k range and lets each cast one vote.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fileio import write_csv
from .rng import substream

logger = logging.getLogger(__name__)

INDEX_NAMES: tuple[str, ...] = (
    "calinski_harabasz",
    "silhouette",
    "davies_bouldin",
    "dunn",
    "hartigan",
)

#: Hartigan's rule recommends the smallest k whose statistic drops to
#: this threshold or below.
HARTIGAN_THRESHOLD = 10.0


class ClusterError(Exception):
    pass


@dataclass
class ClusterSolution:
    k: int
    assignments: np.ndarray  # (n,) labels in [0, k)
    centroids: np.ndarray    # (k, K)
    inertia: float
    n_starts_used: int
    inertia_history: list[float]  # per-iteration inertia of the winning start


def _check_points(points) -> np.ndarray:
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P.reshape(-1, 1)
    if not np.isfinite(P).all():
        raise ClusterError("points must be finite")
    return P


def lloyd(points, centroids, max_iter: int = 300):
    """Lloyd iterations from given initial centroids.

    Returns (labels, centroids, inertia, history). Empty clusters are
    repaired by seizing the point currently farthest from its centroid.
    Inertia is checked to be non-increasing across iterations.
    """
    P = _check_points(points)
    C = np.asarray(centroids, dtype=float).copy()
    n = P.shape[0]
    k = C.shape[0]
    sq = np.einsum("ij,ij->i", P, P)
    labels: np.ndarray | None = None
    history: list[float] = []
    prev = math.inf
    for _ in range(max_iter):
        d2 = sq[:, None] + np.einsum("ij,ij->i", C, C)[None, :] - 2.0 * (P @ C.T)
        np.maximum(d2, 0.0, out=d2)
        new_labels = d2.argmin(axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        if (counts == 0).any():
            own = d2[np.arange(n), labels].copy()
            for empty in np.nonzero(counts == 0)[0]:
                victim = int(np.argmax(own))
                labels[victim] = empty
                own[victim] = -1.0
            counts = np.bincount(labels, minlength=k)
        for dim in range(P.shape[1]):
            C[:, dim] = np.bincount(labels, weights=P[:, dim], minlength=k) / counts
        diff = P - C[labels]
        inertia = float(np.einsum("ij,ij->", diff, diff))
        if inertia > prev + 1e-9 * (1.0 + abs(prev)):
            raise AssertionError(f"inertia increased across a Lloyd iteration: {prev} -> {inertia}")
        history.append(inertia)
        prev = inertia
    assert labels is not None
    return labels, C, history[-1], history


def kmeans(points, k: int, n_starts: int = 100, seed: int = 0, max_iter: int = 300) -> ClusterSolution:
    """Best-of-`n_starts` k-means. Initial centroids of each start are
    k distinct rows sampled uniformly."""
    P = _check_points(points)
    n = P.shape[0]
    if k < 1:
        raise ClusterError("k must be positive")
    if n < k:
        raise ClusterError(f"cannot form {k} clusters from {n} points")
    if n_starts < 1:
        raise ClusterError("n_starts must be positive")
    best: ClusterSolution | None = None
    for s in range(n_starts):
        rng = substream(seed, s)
        init = P[rng.choice(n, size=k, replace=False)]
        labels, centroids, inertia, history = lloyd(P, init, max_iter)
        if best is None or inertia < best.inertia:
            best = ClusterSolution(k, labels, centroids, inertia, n_starts, history)
    assert best is not None
    return best


def standardize_columns(points) -> np.ndarray:
    """Z-score each column; zero-variance columns are left at 0."""
    P = _check_points(points).copy()
    mean = P.mean(axis=0)
    sd = P.std(axis=0)
    zero = sd == 0
    if zero.any():
        logger.info("standardize_columns: %d zero-variance columns", int(zero.sum()))
        sd = np.where(zero, 1.0, sd)
    return (P - mean) / sd


# ---------------------------------------------------------------------------
# Validity indices


def _pair_stats(P: np.ndarray, labels: np.ndarray, k: int, block: int = 2048):
    """Pairwise Euclidean statistics without materializing the full
    distance matrix: per-point sums of distances to each cluster,
    minimum between-cluster distance, and maximum within-cluster
    diameter."""
    n = P.shape[0]
    sq = np.einsum("ij,ij->i", P, P)
    members = [labels == c for c in range(k)]
    sums = np.zeros((n, k))
    inter = np.full((k, k), np.inf)
    intra = np.zeros(k)
    for start in range(0, n, block):
        stop = min(start + block, n)
        d = sq[start:stop, None] + sq[None, :] - 2.0 * (P[start:stop] @ P.T)
        np.maximum(d, 0.0, out=d)
        np.sqrt(d, out=d)
        lab_rows = labels[start:stop]
        for c in range(k):
            dc = d[:, members[c]]
            if dc.shape[1] == 0:
                continue
            sums[start:stop, c] = dc.sum(axis=1)
            row_min = dc.min(axis=1)
            row_max = dc.max(axis=1)
            for c1 in range(k):
                sel = lab_rows == c1
                if not sel.any():
                    continue
                if c1 == c:
                    intra[c] = max(intra[c], float(row_max[sel].max()))
                else:
                    inter[c1, c] = min(inter[c1, c], float(row_min[sel].min()))
    inter = np.minimum(inter, inter.T)
    return sums, inter, intra


def silhouette_mean(points, labels) -> float:
    """Mean silhouette over all points (singleton clusters score 0)."""
    P = _check_points(points)
    labels = np.asarray(labels)
    k = int(labels.max()) + 1
    n = P.shape[0]
    sums, _, _ = _pair_stats(P, labels, k)
    counts = np.bincount(labels, minlength=k)
    own = sums[np.arange(n), labels]
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_to = sums / counts[None, :]
    mean_to[:, counts == 0] = np.inf
    a = np.where(counts[labels] > 1, own / np.maximum(counts[labels] - 1, 1), 0.0)
    mean_to[np.arange(n), labels] = np.inf
    b = mean_to.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s = np.where(counts[labels] > 1, s, 0.0)
    return float(s.mean())


def calinski_harabasz(points, labels) -> float:
    """Between/within variance ratio; +inf when within is zero."""
    P = _check_points(points)
    labels = np.asarray(labels)
    k = int(labels.max()) + 1
    n = P.shape[0]
    if k < 2 or n <= k:
        return math.nan
    grand = P.mean(axis=0)
    sst = float(((P - grand) ** 2).sum())
    ssw = 0.0
    for c in range(k):
        sel = P[labels == c]
        ssw += float(((sel - sel.mean(axis=0)) ** 2).sum())
    ssb = max(sst - ssw, 0.0)
    if ssw == 0.0:
        return math.inf
    return (ssb / (k - 1)) / (ssw / (n - k))


def davies_bouldin(points, labels, centroids) -> float:
    """Mean over clusters of the worst (S_i + S_j) / M_ij ratio; NaN if
    two centroids coincide."""
    P = _check_points(points)
    labels = np.asarray(labels)
    C = np.asarray(centroids, dtype=float)
    k = C.shape[0]
    scatter = np.empty(k)
    for c in range(k):
        sel = P[labels == c]
        scatter[c] = float(np.sqrt(((sel - C[c]) ** 2).sum(axis=1)).mean()) if len(sel) else 0.0
    gap = np.sqrt(((C[:, None, :] - C[None, :, :]) ** 2).sum(axis=2))
    off = ~np.eye(k, dtype=bool)
    if (gap[off] == 0).any():
        return math.nan
    with np.errstate(divide="ignore"):
        ratio = (scatter[:, None] + scatter[None, :]) / gap
    ratio[~off] = -math.inf
    return float(ratio.max(axis=1).mean())


def dunn_index(points, labels) -> float:
    """Smallest between-cluster distance over largest within-cluster
    diameter; NaN when every cluster is a singleton."""
    P = _check_points(points)
    labels = np.asarray(labels)
    k = int(labels.max()) + 1
    if k < 2:
        return math.nan
    _, inter, intra = _pair_stats(P, labels, k)
    diameter = float(intra.max())
    if diameter == 0.0:
        return math.nan
    off = ~np.eye(k, dtype=bool)
    return float(inter[off].min()) / diameter


def hartigan_statistic(ssw_k: float, ssw_k1: float, n: int, k: int) -> float:
    """H(k) comparing the k- and (k+1)-cluster fits."""
    if ssw_k1 == 0.0:
        return 0.0 if ssw_k == 0.0 else math.inf
    return (ssw_k / ssw_k1 - 1.0) * (n - k - 1)


# ---------------------------------------------------------------------------
# Cluster-count selection


@dataclass
class KSelectionReport:
    k_range: tuple[int, int]
    values: dict[str, dict[int, float]]   # index -> {k: value}
    recommended: dict[str, int | None]    # index -> its k vote (None = abstain)
    vote_counts: dict[int, int]
    final_k: int


def evaluate_k_range(points, k_range=(2, 10), n_starts: int = 100, seed: int = 0,
                     max_iter: int = 300, include_hartigan_extra: bool = True) -> dict[int, ClusterSolution]:
    """Best k-means solution for each k in the inclusive range (plus
    k_max + 1 when feasible, needed by Hartigan's rule)."""
    P = _check_points(points)
    k_min, k_max = int(k_range[0]), int(k_range[1])
    n = P.shape[0]
    if not (2 <= k_min <= k_max <= n - 1):
        raise ClusterError(f"k range [{k_min}, {k_max}] invalid for {n} points")
    ks = list(range(k_min, k_max + 1))
    if include_hartigan_extra and k_max + 1 <= n:
        ks.append(k_max + 1)
    return {k: kmeans(P, k, n_starts=n_starts, seed=seed, max_iter=max_iter) for k in ks}


def majority_vote(recommended: dict[str, int | None]) -> tuple[int, dict[int, int]]:
    """Final k = the k with the most index votes; ties break low."""
    counts: dict[int, int] = {}
    for k in recommended.values():
        if k is not None:
            counts[k] = counts.get(k, 0) + 1
    if not counts:
        raise ClusterError("every validity index abstained; cannot choose k")
    best = max(counts.items(), key=lambda kv: (kv[1], -kv[0]))
    return best[0], counts


def _argbest(values: dict[int, float], maximize: bool) -> int | None:
    defined = {k: v for k, v in values.items() if not math.isnan(v)}
    if not defined:
        return None
    if maximize:
        return max(defined.items(), key=lambda kv: (kv[1], -kv[0]))[0]
    return min(defined.items(), key=lambda kv: (kv[1], kv[0]))[0]


def select_k(points, k_range=(2, 10), n_starts: int = 100, seed: int = 0,
             indices: tuple[str, ...] = INDEX_NAMES, max_iter: int = 300,
             solutions: dict[int, ClusterSolution] | None = None) -> KSelectionReport:
    """Run the index battery over the k range and apply the majority rule.

    An index that is undefined for some k skips that k; an index
    undefined everywhere abstains (both are logged).
    """
    P = _check_points(points)
    k_min, k_max = int(k_range[0]), int(k_range[1])
    if solutions is None:
        solutions = evaluate_k_range(P, (k_min, k_max), n_starts, seed, max_iter,
                                     include_hartigan_extra="hartigan" in indices)
    n = P.shape[0]
    ks = [k for k in range(k_min, k_max + 1) if k in solutions]
    values: dict[str, dict[int, float]] = {name: {} for name in indices}
    for k in ks:
        sol = solutions[k]
        for name in indices:
            if name == "calinski_harabasz":
                v = calinski_harabasz(P, sol.assignments)
            elif name == "silhouette":
                v = silhouette_mean(P, sol.assignments)
            elif name == "davies_bouldin":
                v = davies_bouldin(P, sol.assignments, sol.centroids)
            elif name == "dunn":
                v = dunn_index(P, sol.assignments)
            elif name == "hartigan":
                nxt = solutions.get(k + 1)
                v = hartigan_statistic(sol.inertia, nxt.inertia, n, k) if nxt is not None else math.nan
            else:
                raise ClusterError(f"unknown validity index {name!r}")
            if math.isnan(v):
                logger.info("index %s undefined at k=%d", name, k)
            values[name][k] = v
    recommended: dict[str, int | None] = {}
    for name in indices:
        if name == "davies_bouldin":
            recommended[name] = _argbest(values[name], maximize=False)
        elif name == "hartigan":
            vote = None
            for k in ks:
                v = values[name].get(k, math.nan)
                if not math.isnan(v) and v <= HARTIGAN_THRESHOLD:
                    vote = k
                    break
            recommended[name] = vote
        else:
            recommended[name] = _argbest(values[name], maximize=True)
        if recommended[name] is None:
            logger.warning("index %s abstained over k range [%d, %d]", name, k_min, k_max)
    final_k, vote_counts = majority_vote(recommended)
    return KSelectionReport((k_min, k_max), values, recommended, vote_counts, final_k)


# ---------------------------------------------------------------------------
# Recovery scoring and I/O


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Chance-corrected agreement between two labelings."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ClusterError("label vectors must have equal length")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    ka = int(ai.max()) + 1
    kb = int(bi.max()) + 1
    table = np.zeros((ka, kb), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_cells = comb2(table).sum()
    sum_rows = comb2(table.sum(axis=1)).sum()
    sum_cols = comb2(table.sum(axis=0)).sum()
    total = comb2(n)
    expected = sum_rows * sum_cols / total if total > 0 else 0.0
    max_index = (sum_rows + sum_cols) / 2.0
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


def write_assignments_csv(keys, labels, path: str | Path) -> None:
    write_csv(path, ["bank_id", "year", "cluster"],
              ((bank, year, int(label)) for (bank, year), label in zip(keys, labels)))


def read_assignments_csv(path: str | Path) -> tuple[list[tuple[str, int]], np.ndarray]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["bank_id", "year", "cluster"]:
            raise ValueError(f"unexpected assignments header in {path}")
        keys: list[tuple[str, int]] = []
        labels: list[int] = []
        for bank, year, cluster in reader:
            keys.append((bank, int(year)))
            labels.append(int(cluster))
    return keys, np.asarray(labels, dtype=np.int64)


def write_kselection_csv(report: KSelectionReport, path: str | Path) -> None:
    rows = []
    for name, by_k in report.values.items():
        for k in sorted(by_k):
            rows.append((name, k, by_k[k], report.recommended[name] == k))
    rows.append(("majority", report.final_k, float(report.vote_counts[report.final_k]), True))
    write_csv(path, ["index", "k", "value", "vote"], rows)
