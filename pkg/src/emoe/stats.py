"""Trend and two-sample statistics used by the experiment harness.

Jonckheere-Terpstra reports the normal-approximation z-score with the no-tie
variance; for small tie-free samples the p-value comes from the exact null
distribution instead, since the approximation is poor there. The Welch t-test
evaluates the t tail through a continued-fraction regularized incomplete beta
function so no special-function package is needed at scoring time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class TrendTestResult:
    test: str
    statistic: float
    z_score: float | None
    p_value: float
    df: float | None = None
    method: str = "normal"

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p-value {self.p_value} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"test": self.test, "statistic": self.statistic, "z_score": self.z_score,
                "p_value": self.p_value, "df": self.df, "method": self.method}


def normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


# ---------------------------------------------------------------------------
# Jonckheere-Terpstra


def jt_statistic(groups: Sequence[Sequence[float]]) -> float:
    """Count of ascending cross-group pairs ``(a in g_k, b in g_l, k < l)``, ties count 1/2."""
    arrays = [np.asarray(g, dtype=np.float64) for g in groups]
    total = 0.0
    for k in range(len(arrays)):
        a = np.sort(arrays[k])
        for l in range(k + 1, len(arrays)):
            b = arrays[l]
            below = np.searchsorted(a, b, side="left")  # a < b
            upto = np.searchsorted(a, b, side="right")  # a <= b
            total += float(np.sum(below) + 0.5 * np.sum(upto - below))
    return total


def jt_moments(sizes: Sequence[int]) -> tuple[float, float]:
    """Null mean and no-tie variance of the JT statistic."""
    n = np.asarray(sizes, dtype=np.float64)
    big_n = n.sum()
    mean = (big_n**2 - np.sum(n**2)) / 4.0
    var = (big_n**2 * (2 * big_n + 3) - np.sum(n**2 * (2 * n + 3))) / 72.0
    return float(mean), float(var)


def _gaussian_binomial(total: int, k: int) -> list[int]:
    """Coefficients of the q-binomial ``[total choose k]_q`` (exact integers)."""
    coeffs = [1]
    for i in range(1, k + 1):
        # multiply by (1 - q^(total - k + i))
        shift = total - k + i
        out = coeffs + [0] * shift
        for j, c in enumerate(coeffs):
            out[j + shift] -= c
        # divide by (1 - q^i): running sum with stride i
        for j in range(i, len(out)):
            out[j] += out[j - i]
        coeffs = out[: len(out) - i]
    return coeffs


def jt_null_counts(sizes: Sequence[int]) -> list[int]:
    """Exact null distribution of JT (no ties): ``counts[j]`` orderings give ``JT = j``.

    Adding group ``l`` after groups ``0..l-1`` contributes an independent
    Mann-Whitney count whose generating function is a q-binomial coefficient.
    """
    counts, seen = [1], 0
    for n in sizes:
        stage = _gaussian_binomial(seen + n, n)
        out = [0] * (len(counts) + len(stage) - 1)
        for i, a in enumerate(counts):
            if a:
                for j, b in enumerate(stage):
                    out[i + j] += a * b
        counts, seen = out, seen + n
    return counts


EXACT_MAX_N = 20


def jonckheere_terpstra(groups: Sequence[Sequence[float]], alternative: str = "increasing",
                        method: str = "auto") -> TrendTestResult:
    """JT trend test across ordered groups.

    ``alternative="increasing"`` tests for values rising with group index,
    ``"decreasing"`` for values falling. ``method="auto"`` uses the exact
    null distribution when the total size is at most ``EXACT_MAX_N`` and
    there are no ties, the normal approximation otherwise.
    """
    if len(groups) < 2:
        raise ValueError("need at least two groups")
    if any(len(g) == 0 for g in groups):
        raise ValueError("every group must be nonempty")
    if alternative not in ("increasing", "decreasing"):
        raise ValueError(f"unknown alternative {alternative!r}")
    if method not in ("auto", "exact", "normal"):
        raise ValueError(f"unknown method {method!r}")
    sizes = [len(g) for g in groups]
    stat = jt_statistic(groups)
    mean, var = jt_moments(sizes)
    z = (stat - mean) / math.sqrt(var) if var > 0 else 0.0
    values = np.concatenate([np.asarray(g, dtype=np.float64) for g in groups])
    ties = len(np.unique(values)) < len(values)
    if method == "exact" and ties:
        raise ValueError("exact JT p-values need tie-free data")
    if method == "exact" or (method == "auto" and not ties and sum(sizes) <= EXACT_MAX_N):
        counts = jt_null_counts(sizes)
        j = int(round(stat))
        hits = sum(counts[j:]) if alternative == "increasing" else sum(counts[: j + 1])
        return TrendTestResult("jonckheere_terpstra", stat, z, hits / sum(counts), method="exact")
    p = normal_sf(z) if alternative == "increasing" else normal_sf(-z)
    return TrendTestResult("jonckheere_terpstra", stat, z, p, method="normal")


# ---------------------------------------------------------------------------
# Welch t-test


def _betacf(a: float, b: float, x: float, max_iter: int = 400, eps: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_sf(t: float, df: float) -> float:
    """Survival function of Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if t == 0:
        return 0.5
    t2 = t * t
    if t2 < df:
        # small |t|: work with t^2 / (df + t^2) directly to avoid cancellation near x = 1
        tail = 0.5 - 0.5 * betainc_reg(0.5, df / 2.0, t2 / (df + t2))
    else:
        tail = 0.5 * betainc_reg(df / 2.0, 0.5, df / (df + t2))
    return tail if t > 0 else 1.0 - tail


def welch_t_test(a: Sequence[float], b: Sequence[float]) -> TrendTestResult:
    """One-sided Welch test of ``mean(a) > mean(b)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least two values")
    va = a.var(ddof=1) / len(a)
    vb = b.var(ddof=1) / len(b)
    diff = float(a.mean() - b.mean())
    se2 = va + vb
    if se2 == 0.0:
        if diff == 0.0:
            return TrendTestResult("welch_t", 0.0, None, 0.5, float("nan"))
        t = math.copysign(math.inf, diff)
        return TrendTestResult("welch_t", t, None, 0.0 if diff > 0 else 1.0, float("nan"))
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    return TrendTestResult("welch_t", t, None, min(1.0, max(0.0, t_sf(t, df))), float(df))


# ---------------------------------------------------------------------------
# correlation and binning


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("need two equal-length samples of size >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("pearson correlation undefined for zero variance")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def quartile_split(scores: Sequence[float]) -> list[list[int]]:
    """Indices of the four ascending quartile bins.

    Bin sizes are ``n // 4`` with the remainder handed to the earliest bins;
    equal scores keep input order.
    """
    n = len(scores)
    if n < 4:
        raise ValueError("need at least 4 scores for quartiles")
    order = sorted(range(n), key=lambda i: (scores[i], i))
    base, rem = divmod(n, 4)
    bins, start = [], 0
    for q in range(4):
        size = base + (1 if q < rem else 0)
        bins.append(order[start : start + size])
        start += size
    return bins
