"""Permutation, Kolmogorov-Smirnov, and Welch tests for the comparison reports."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import t as t_dist

_KS_EXACT_MAX_N = 12
_KS_SERIES_TERMS = 100


@dataclass(frozen=True)
class PermTestResult:
    t_obs: float
    p: float
    b: int
    null_samples: Optional[np.ndarray] = None


def permutation_test_mean_diff(d_cross: Sequence[float], d_within: Sequence[float],
                               b: int, seed: int,
                               keep_null: bool = False) -> PermTestResult:
    """One-sided permutation test on the difference of sample means.

    T_obs = mean(d_cross) - mean(d_within). Group labels of the pooled values
    are permuted b times; p is the exceedance fraction count(T* >= T_obs) / b.
    """
    cross = np.asarray(d_cross, dtype=float)
    within = np.asarray(d_within, dtype=float)
    if cross.size == 0 or within.size == 0:
        raise ValueError("both samples must be non-empty")
    if b < 1:
        raise ValueError("b must be >= 1")
    n1 = cross.size
    t_obs = float(cross.mean() - within.mean())
    pooled = np.concatenate([cross, within])
    rng = np.random.default_rng(seed)
    nulls = np.empty(b)
    for rep in range(b):
        perm = rng.permutation(pooled)
        # same evaluation as t_obs so label-preserving permutations tie exactly
        nulls[rep] = perm[:n1].mean() - perm[n1:].mean()
    count = int(np.count_nonzero(nulls >= t_obs))
    return PermTestResult(
        t_obs=t_obs,
        p=count / b,
        b=b,
        null_samples=nulls if keep_null else None,
    )


@dataclass(frozen=True)
class KSResult:
    d: float
    p: float
    exact: bool


def _ks_statistic(a: np.ndarray, b: np.ndarray) -> float:
    data_all = np.concatenate([a, b])
    cdf_a = np.searchsorted(np.sort(a), data_all, side="right") / a.size
    cdf_b = np.searchsorted(np.sort(b), data_all, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def _ks_asymptotic_sf(lam: float) -> float:
    if lam < 0.02:
        return 1.0
    k = np.arange(1, _KS_SERIES_TERMS + 1)
    total = 2.0 * np.sum((-1.0) ** (k - 1) * np.exp(-2.0 * k ** 2 * lam ** 2))
    return float(min(1.0, max(0.0, total)))


def ks_two_sample(a: Sequence[float], b: Sequence[float]) -> KSResult:
    """Two-sample Kolmogorov-Smirnov test.

    D = sup |ECDF_a - ECDF_b|. The p-value enumerates all label assignments
    of the pooled sample when n_a + n_b <= 12, otherwise it uses the
    asymptotic Kolmogorov distribution with effective size
    n_a*n_b/(n_a + n_b).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    d_obs = _ks_statistic(a, b)
    n_a, n_b = a.size, b.size
    if n_a + n_b <= _KS_EXACT_MAX_N:
        pooled = np.concatenate([a, b])
        count = 0
        total = 0
        for idx in itertools.combinations(range(n_a + n_b), n_a):
            mask = np.zeros(n_a + n_b, dtype=bool)
            mask[list(idx)] = True
            d_perm = _ks_statistic(pooled[mask], pooled[~mask])
            if d_perm >= d_obs - 1e-12:
                count += 1
            total += 1
        return KSResult(d=d_obs, p=count / total, exact=True)
    effective_n = n_a * n_b / (n_a + n_b)
    lam = math.sqrt(effective_n) * d_obs
    return KSResult(d=d_obs, p=_ks_asymptotic_sf(lam), exact=False)


@dataclass(frozen=True)
class GroupStats:
    mean: float
    sd: float
    n: int


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p_two_sided: float


def welch_t(stats_a: GroupStats, stats_b: GroupStats) -> WelchResult:
    """Welch's unequal-variance t-test from summary statistics.

    t = (mean_b - mean_a) / sqrt(sd_a^2/n_a + sd_b^2/n_b), with the
    Welch-Satterthwaite degrees of freedom and a two-sided Student-t p-value.
    Both sd zero yields t = 0, p = 1 for equal means and an infinite t with
    p = 0 for unequal means.
    """
    for s in (stats_a, stats_b):
        if s.n < 2:
            raise ValueError("need n >= 2 in each group")
        if s.sd < 0:
            raise ValueError("sd must be non-negative")
    va = stats_a.sd ** 2 / stats_a.n
    vb = stats_b.sd ** 2 / stats_b.n
    diff = stats_b.mean - stats_a.mean
    if va + vb == 0.0:
        if diff == 0.0:
            return WelchResult(t=0.0, df=float("nan"), p_two_sided=1.0)
        return WelchResult(t=math.copysign(math.inf, diff), df=float("nan"),
                           p_two_sided=0.0)
    t_stat = diff / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (
        va ** 2 / (stats_a.n - 1) + vb ** 2 / (stats_b.n - 1)
    )
    p = float(2.0 * t_dist.sf(abs(t_stat), df))
    return WelchResult(t=t_stat, df=df, p_two_sided=p)


def group_stats(values: Sequence[float]) -> GroupStats:
    """Sample mean / sd (ddof=1) / n for one group."""
    arr = np.asarray(values, dtype=float)
    if arr.size < 2:
        raise ValueError("need at least two values")
    return GroupStats(mean=float(arr.mean()), sd=float(arr.std(ddof=1)), n=arr.size)
