"""Rank-sum tests, equality-of-group-means tests, and linear
discriminant functions with per-function Wilks lambdas.

Distribution tails are computed in-house: the F tail through a
continued-fraction regularized incomplete beta and the chi-square tail
through the regularized incomplete gamma, both good to better than ten
digits over the ranges used here. All p-values are two-sided.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Special functions


def normal_sf(z: float) -> float:
    """Upper tail of the standard normal."""
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (Lentz's algorithm)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 400):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ArithmeticError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("incomplete beta requires positive parameters")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def f_sf(f: float, df1: float, df2: float) -> float:
    """Upper tail P(F > f) of the F distribution (fractional dfs allowed)."""
    if df1 <= 0 or df2 <= 0:
        raise ValueError("F distribution requires positive degrees of freedom")
    if f <= 0.0:
        return 1.0
    if math.isinf(f):
        return 0.0
    return betainc_reg(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f))


def _gamma_p(s: float, x: float) -> float:
    """Regularized lower incomplete gamma P(s, x)."""
    if x < 0 or s <= 0:
        raise ValueError("invalid incomplete gamma arguments")
    if x == 0.0:
        return 0.0
    if x < s + 1.0:
        # series expansion
        term = 1.0 / s
        total = term
        ap = s
        for _ in range(1000):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * 1e-16:
                break
        return total * math.exp(-x + s * math.log(x) - math.lgamma(s))
    # continued fraction for Q(s, x)
    tiny = 1e-300
    b = x + 1.0 - s
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 1000):
        an = -i * (i - s)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            break
    q = math.exp(-x + s * math.log(x) - math.lgamma(s)) * h
    return 1.0 - q


def chi2_sf(x: float, df: float) -> float:
    """Upper tail of the chi-square distribution."""
    if x <= 0.0:
        return 1.0
    return 1.0 - _gamma_p(df / 2.0, x / 2.0)


def stars(p: float) -> str:
    """Significance markers: *** p<0.01, ** p<0.05, * p<0.10."""
    if math.isnan(p):
        return ""
    if p < 0.01:
        return "***"
    if p < 0.05:
        return "**"
    if p < 0.10:
        return "*"
    return ""


# ---------------------------------------------------------------------------
# Wilcoxon-Mann-Whitney


@dataclass(frozen=True)
class WmwResult:
    u_a: float
    u_b: float
    z: float
    p_two_sided: float
    exact: bool


def _midranks(values: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """Midranks of `values`, the sorted tie-group sizes, and a tie flag."""
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    n = values.size
    ranks = np.empty(n)
    group_sizes = []
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        # ranks i+1 .. j+1 share the midrank
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        group_sizes.append(j - i + 1)
        i = j + 1
    sizes = np.asarray(group_sizes)
    return ranks, sizes, bool((sizes > 1).any())


def _u_counts(n_a: int, n_b: int) -> np.ndarray:
    """Null distribution of U for tie-free samples: counts[u] is the
    number of rank assignments with that U, over all C(N, n_a) splits."""
    u_max = n_a * n_b
    # dp[j][u]: ways to spread j sample-a items over the pooled order so
    # far with U = u; processing pooled positions one at a time, a new
    # a-item at position i beats the (i - j) b-items already placed.
    dp = np.zeros((n_a + 1, u_max + 1), dtype=np.int64)
    dp[0, 0] = 1
    for i in range(1, n_a + n_b + 1):
        for j in range(min(i, n_a), 0, -1):
            beats = i - j  # b-items before this a-item
            if beats > n_b:
                continue
            if beats:
                dp[j, beats:] += dp[j - 1, :-beats]
            else:
                dp[j] += dp[j - 1]
    return dp[n_a]


def wmw_test(a, b, exact_threshold: int = 12) -> WmwResult:
    """Two-sided Wilcoxon-Mann-Whitney test.

    Small tie-free samples (both sizes at most `exact_threshold`) get
    an exact p-value by enumerating the rank-split distribution of U;
    otherwise a normal approximation with tie-corrected variance and a
    0.5 continuity correction is used.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    n_a, n_b = a.size, b.size
    pooled = np.concatenate([a, b])
    ranks, tie_sizes, has_ties = _midranks(pooled)
    r_a = float(ranks[:n_a].sum())
    u_a = r_a - n_a * (n_a + 1) / 2.0
    u_b = n_a * n_b - u_a

    n = n_a + n_b
    mu = n_a * n_b / 2.0
    tie_term = float(((tie_sizes ** 3) - tie_sizes).sum())
    var = n_a * n_b / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0.0:
        z = 0.0
    elif u_a > mu:
        z = (u_a - mu - 0.5) / math.sqrt(var)
    elif u_a < mu:
        z = (u_a - mu + 0.5) / math.sqrt(var)
    else:
        z = 0.0

    if not has_ties and max(n_a, n_b) <= exact_threshold:
        counts = _u_counts(n_a, n_b)
        u_min = int(round(min(u_a, u_b)))
        tail = int(counts[: u_min + 1].sum())
        total = int(counts.sum())
        p = min(1.0, 2.0 * tail / total)
        return WmwResult(u_a, u_b, z, p, exact=True)
    p = min(1.0, 2.0 * normal_sf(abs(z)))
    return WmwResult(u_a, u_b, z, p, exact=False)


# ---------------------------------------------------------------------------
# Equality-of-group-means tests (univariate Wilks lambda / F)


@dataclass(frozen=True)
class VariableTest:
    variable: str
    wilks_lambda: float
    f_stat: float
    df1: int
    df2: int
    p_value: float
    defined: bool = True


def group_mean_tests(values, labels, variable_names=None) -> list[VariableTest]:
    """Per-variable one-way test of equal group means.

    Lambda = SSW/SST and F = ((N-g)/(g-1)) * (1-Lambda)/Lambda with
    (g-1, N-g) degrees of freedom. A variable with zero total variance
    is flagged undefined rather than raising.
    """
    X = np.asarray(values, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    labels = np.asarray(labels)
    groups, inverse = np.unique(labels, return_inverse=True)
    g = groups.size
    n, n_vars = X.shape
    if g < 2:
        raise ValueError("need at least two groups")
    if n <= g:
        raise ValueError("need more observations than groups")
    if variable_names is None:
        variable_names = tuple(f"var_{i}" for i in range(n_vars))
    grand = X.mean(axis=0)
    sst = ((X - grand) ** 2).sum(axis=0)
    ssw = np.zeros(n_vars)
    for c in range(g):
        sub = X[inverse == c]
        ssw += ((sub - sub.mean(axis=0)) ** 2).sum(axis=0)
    out: list[VariableTest] = []
    df1, df2 = g - 1, n - g
    for i, name in enumerate(variable_names):
        if sst[i] <= 0.0:
            logger.warning("group_mean_tests: %s has zero total variance; test undefined", name)
            out.append(VariableTest(name, math.nan, math.nan, df1, df2, math.nan, defined=False))
            continue
        lam = float(ssw[i] / sst[i])
        if lam == 0.0:
            out.append(VariableTest(name, 0.0, math.inf, df1, df2, 0.0))
            continue
        f = (df2 / df1) * (1.0 - lam) / lam
        out.append(VariableTest(name, lam, f, df1, df2, f_sf(f, df1, df2)))
    return out


# ---------------------------------------------------------------------------
# Linear discriminant functions


@dataclass(frozen=True)
class DiscriminantFunction:
    coefficients: np.ndarray
    eigenvalue: float
    wilks_lambda: float  # residual lambda for this and later functions
    f_stat: float
    df1: float
    df2: float
    p_value: float


@dataclass(frozen=True)
class DiscriminantReport:
    functions: list[DiscriminantFunction]
    method: str           # "rao" or "bartlett"
    ridge_used: float     # 0.0 when no regularization was needed


def _rao_f(lam: float, p: float, q: float, n: int) -> tuple[float, float, float, float]:
    """Rao's F transformation of a Wilks lambda with p variables and q
    hypothesis df. Returns (F, df1, df2, p_value)."""
    denom = p * p + q * q - 5.0
    if p * q == 2.0 or denom <= 0.0:
        s = 1.0
    else:
        s = math.sqrt((p * p * q * q - 4.0) / denom)
    df1 = p * q
    w = n - 1.0 - (p + q + 1.0) / 2.0
    df2 = w * s - df1 / 2.0 + 1.0
    if df2 <= 0.0:
        return math.nan, df1, df2, math.nan
    if lam <= 0.0:
        return math.inf, df1, df2, 0.0
    lam_s = lam ** (1.0 / s)
    f = (1.0 - lam_s) / lam_s * df2 / df1
    return f, df1, df2, f_sf(f, df1, df2)


def lda_discriminant(points, labels, method: str = "rao") -> DiscriminantReport:
    """Canonical discriminant functions for grouped observations.

    Solves the generalized eigenproblem B v = lambda W v (B between-,
    W within-group scatter) through a Cholesky reduction. There are
    min(g - 1, K) functions; the k-th residual Wilks lambda is the
    product of 1/(1 + lambda_j) over functions j >= k, tested with
    Rao's F by default or Bartlett's chi-square when requested.
    """
    if method not in ("rao", "bartlett"):
        raise ValueError(f"unknown method {method!r}")
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    labels = np.asarray(labels)
    groups, inverse = np.unique(labels, return_inverse=True)
    g = groups.size
    n, n_vars = X.shape
    if g < 2:
        raise ValueError("need at least two groups")
    grand = X.mean(axis=0)
    W = np.zeros((n_vars, n_vars))
    B = np.zeros((n_vars, n_vars))
    for c in range(g):
        sub = X[inverse == c]
        mu = sub.mean(axis=0)
        centered = sub - mu
        W += centered.T @ centered
        d = (mu - grand).reshape(-1, 1)
        B += sub.shape[0] * (d @ d.T)

    ridge_used = 0.0
    scale = float(np.trace(W)) / n_vars if np.trace(W) > 0 else 1.0
    L = None
    for eps in (0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2):
        try:
            L = np.linalg.cholesky(W + eps * scale * np.eye(n_vars))
            ridge_used = eps * scale if eps else 0.0
            break
        except np.linalg.LinAlgError:
            continue
    if L is None:
        raise ValueError("within-group scatter matrix is singular even after regularization")
    if ridge_used:
        logger.warning("lda_discriminant: ridge %.3g added to the within-group scatter", ridge_used)

    Y = np.linalg.solve(L, B)
    M = np.linalg.solve(L, Y.T).T
    M = 0.5 * (M + M.T)
    eigvals, eigvecs = np.linalg.eigh(M)
    order = np.argsort(eigvals)[::-1]
    m = min(g - 1, n_vars)
    eigvals = np.clip(eigvals[order][:m], 0.0, None)
    vectors = np.linalg.solve(L.T, eigvecs[:, order][:, :m])

    # Scale so that v' (W / (N - g)) v = 1, largest-magnitude entry positive.
    sw = W / (n - g)
    functions: list[DiscriminantFunction] = []
    for j in range(m):
        v = vectors[:, j]
        norm = float(v @ sw @ v)
        if norm > 0:
            v = v / math.sqrt(norm)
        if abs(v.min()) > abs(v.max()):
            v = -v
        lam_resid = float(np.prod(1.0 / (1.0 + eigvals[j:])))
        p_k = n_vars - j
        q_k = g - 1 - j
        if method == "rao":
            f, df1, df2, p_val = _rao_f(lam_resid, p_k, q_k, n)
        else:
            df1 = p_k * q_k
            chi2 = -(n - 1.0 - (n_vars + g) / 2.0) * math.log(lam_resid) if lam_resid > 0 else math.inf
            f, df2, p_val = chi2, math.nan, chi2_sf(chi2, df1)
        functions.append(DiscriminantFunction(v, float(eigvals[j]), lam_resid, f, df1, df2, p_val))
    return DiscriminantReport(functions, method, ridge_used)
