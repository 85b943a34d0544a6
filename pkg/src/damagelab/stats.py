"""Hypothesis tests and confidence intervals for the result tables.

Distribution functions come from scipy. The Mann-Whitney exact branch
enumerates rank assignments directly so that it also handles ties.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np
from scipy import stats as sps

EXACT_MWU_MAX_TOTAL = 12


def welch_t(mean1: float, sd1: float, n1: int, mean2: float, sd2: float, n2: int) -> tuple[float, float, float]:
    """Welch's unequal-variance t-test from summary statistics: ``(t, df, two-sided p)``."""
    if n1 < 2 or n2 < 2:
        raise ValueError("each group needs at least two observations")
    if sd1 < 0 or sd2 < 0:
        raise ValueError("standard deviations must be non-negative")
    v1, v2 = sd1**2 / n1, sd2**2 / n2
    if v1 + v2 == 0:
        raise ValueError("both standard deviations are zero; the statistic is undefined")
    t = (mean1 - mean2) / math.sqrt(v1 + v2)
    df = (v1 + v2) ** 2 / (v1**2 / (n1 - 1) + v2**2 / (n2 - 1))
    p = 2.0 * sps.t.sf(abs(t), df)
    return float(t), float(df), float(min(1.0, p))


def welch_t_samples(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float, float]:
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    return welch_t(xs.mean(), xs.std(ddof=1), len(xs), ys.mean(), ys.std(ddof=1), len(ys))


def _u_statistic(ranks: np.ndarray, n: int) -> float:
    return float(ranks[:n].sum() - n * (n + 1) / 2)


def mann_whitney_u(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """U statistic of ``xs`` and its two-sided p-value.

    Small samples (n + m <= 12) use exact enumeration over all splits of the
    pooled mid-ranks; larger ones use the tie-corrected normal approximation
    without continuity correction.
    """
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    n, m = len(xs), len(ys)
    if n == 0 or m == 0:
        raise ValueError("both samples must be non-empty")
    ranks = sps.rankdata(np.concatenate([xs, ys]))
    u = _u_statistic(ranks, n)
    if n + m <= EXACT_MWU_MAX_TOTAL:
        total = n + m
        us = np.array(
            [ranks[list(idx)].sum() - n * (n + 1) / 2 for idx in itertools.combinations(range(total), n)]
        )
        tol = 1e-9
        lower = np.mean(us <= u + tol)
        upper = np.mean(us >= u - tol)
        return u, float(min(1.0, 2.0 * min(lower, upper)))
    N = n + m
    _, counts = np.unique(ranks, return_counts=True)
    tie_term = np.sum(counts**3 - counts) / (N * (N - 1))
    var = n * m / 12.0 * ((N + 1) - tie_term)
    if var <= 0:
        return u, 1.0
    z = (u - n * m / 2.0) / math.sqrt(var)
    return u, float(min(1.0, 2.0 * sps.norm.sf(abs(z))))


def bootstrap_ci(
    values: Sequence[float],
    statistic: Callable[[np.ndarray], float] = np.mean,
    resamples: int = 10_000,
    level: float = 0.95,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile bootstrap interval; deterministic for a given seed."""
    data = np.asarray(values, dtype=float)
    if data.size == 0:
        raise ValueError("cannot bootstrap an empty sample")
    if resamples < 1000:
        raise ValueError("use at least 1000 resamples")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, data.size, size=(resamples, data.size))
    boot = np.array([statistic(row) for row in data[idx]])
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(boot, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def clopper_pearson(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Exact binomial interval from Beta quantiles."""
    if not 0 <= k <= n or n < 1:
        raise ValueError("need 0 <= k <= n and n >= 1")
    alpha = 1.0 - level
    lo = 0.0 if k == 0 else float(sps.beta.ppf(alpha / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(sps.beta.ppf(1 - alpha / 2, k + 1, n - k))
    return lo, hi


def fisher_exact(a: int, b: int, c: int, d: int) -> float:
    """Two-sided Fisher exact p for [[a, b], [c, d]]: total probability of tables
    with the observed margins that are no more likely than the observed one."""
    if min(a, b, c, d) < 0:
        raise ValueError("counts must be non-negative")
    row1, col1, total = a + b, a + c, a + b + c + d
    if min(row1, col1, total - row1, total - col1) == 0:
        return 1.0  # a zero margin leaves a single admissible table
    dist = sps.hypergeom(total, col1, row1)
    lo, hi = max(0, row1 + col1 - total), min(row1, col1)
    support = np.arange(lo, hi + 1)
    pmf = dist.pmf(support)
    observed = dist.pmf(a)
    p = pmf[pmf <= observed * (1 + 1e-7)].sum()
    return float(min(1.0, p))
