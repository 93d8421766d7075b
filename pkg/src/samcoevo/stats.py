"""Hypothesis tests used to compare runs: Shapiro-Wilk, Kruskal-Wallis with
Dunn post-hoc comparisons (Bonferroni), Wilcoxon signed-rank and paired t.

Only reference distributions (normal, chi-square, Student t) come from
scipy.special; the test statistics are computed here.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import (
    AllZeroDifferences,
    ConstantSample,
    DegenerateGroups,
    SampleTooSmall,
    ZeroVariance,
)

EXACT_WILCOXON_MAX_N = 25


@dataclass(frozen=True)
class TestReport:
    statistic: float
    p_value: float
    test_name: str
    n: tuple[int, ...]

    __test__ = False  # not a pytest class


def _norm_sf(z):
    return special.ndtr(-np.asarray(z, dtype=float))


def _clip_p(p) -> float:
    return float(min(1.0, max(0.0, p)))


def rank_average(values) -> tuple[np.ndarray, np.ndarray]:
    """1-based ranks with ties averaged, plus the sizes of every tie group."""
    x = np.asarray(values, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    ties = []
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        ties.append(j - i + 1)
        i = j + 1
    return ranks, np.array(ties, dtype=float)


# -- Shapiro-Wilk ------------------------------------------------------------------

def _poly(coeffs, x):
    return sum(c * x ** k for k, c in enumerate(coeffs))


def shapiro_wilk_coefficients(n: int) -> np.ndarray:
    """Royston's approximation to the Shapiro-Wilk weights for sample size n."""
    if n == 3:
        return np.array([-math.sqrt(0.5), 0.0, math.sqrt(0.5)])
    m = special.ndtri((np.arange(1, n + 1) - 0.375) / (n + 0.25))
    mm = float(m @ m)
    u = 1.0 / math.sqrt(n)
    a = m / math.sqrt(mm)
    an = a[-1] + _poly([0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056], u)
    if n > 5:
        an1 = a[-2] + _poly([0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633], u)
        phi = (mm - 2 * m[-1] ** 2 - 2 * m[-2] ** 2) / (1 - 2 * an ** 2 - 2 * an1 ** 2)
        a = m / math.sqrt(phi)
        a[-1], a[-2], a[0], a[1] = an, an1, -an, -an1
    else:
        phi = (mm - 2 * m[-1] ** 2) / (1 - 2 * an ** 2)
        a = m / math.sqrt(phi)
        a[-1], a[0] = an, -an
    return a


def shapiro_wilk(sample) -> TestReport:
    x = np.sort(np.asarray(sample, dtype=float))
    n = len(x)
    if n < 3:
        raise SampleTooSmall("Shapiro-Wilk needs at least 3 observations")
    if n > 5000:
        raise ValueError("Shapiro-Wilk approximation only valid for n <= 5000")
    if x[-1] == x[0]:
        raise ConstantSample("sample has zero range")
    a = shapiro_wilk_coefficients(n)
    centred = x - x.mean()
    w = float((a @ x) ** 2 / (centred @ centred))
    w = min(w, 1.0)
    if n == 3:
        p = 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
    elif n <= 11:
        gamma = -2.273 + 0.459 * n
        mu = _poly([0.5440, -0.39978, 0.025054, -0.0006714], n)
        sigma = math.exp(_poly([1.3822, -0.77857, 0.062767, -0.0020322], n))
        y = -math.log(gamma - math.log1p(-w)) if w < 1 else math.inf
        p = float(_norm_sf((y - mu) / sigma))
    else:
        ln = math.log(n)
        mu = _poly([-1.5861, -0.31082, -0.083751, 0.0038915], ln)
        sigma = math.exp(_poly([-0.4803, -0.082676, 0.0030302], ln))
        y = math.log1p(-w) if w < 1 else -math.inf
        p = float(_norm_sf((y - mu) / sigma))
    return TestReport(w, _clip_p(p), "shapiro-wilk", (n,))


# -- Kruskal-Wallis and Dunn ----------------------------------------------------------

@dataclass(frozen=True)
class KruskalDunnResult:
    kruskal: TestReport
    z: np.ndarray           # (k, k) Dunn z statistics, z[i, j] = (mean rank i - mean rank j) / se
    p_raw: np.ndarray       # (k, k) unadjusted two-sided p
    p_adjusted: np.ndarray  # (k, k) Bonferroni-adjusted, unit diagonal
    mean_ranks: np.ndarray
    correction: str = "bonferroni"

    def pairwise(self) -> dict[tuple[int, int], TestReport]:
        k = len(self.mean_ranks)
        return {(i, j): TestReport(float(self.z[i, j]), float(self.p_adjusted[i, j]),
                                   "dunn-bonferroni", self.kruskal.n)
                for i in range(k) for j in range(k)}


def kruskal_dunn(groups) -> KruskalDunnResult:
    groups = [np.asarray(g, dtype=float) for g in groups]
    if len(groups) < 2:
        raise ValueError("need at least two groups")
    if any(len(g) < 2 for g in groups):
        raise SampleTooSmall("every group needs at least two observations")
    pooled = np.concatenate(groups)
    if pooled.max() == pooled.min():
        raise DegenerateGroups("all observations are identical")
    sizes = np.array([len(g) for g in groups])
    n_total = len(pooled)
    ranks, ties = rank_average(pooled)
    bounds = np.cumsum(np.r_[0, sizes])
    rank_sums = np.array([ranks[bounds[i]:bounds[i + 1]].sum() for i in range(len(groups))])
    mean_ranks = rank_sums / sizes
    tie_term = float(np.sum(ties ** 3 - ties))
    h = 12.0 / (n_total * (n_total + 1)) * float(np.sum(rank_sums ** 2 / sizes)) - 3 * (n_total + 1)
    h /= 1.0 - tie_term / (n_total ** 3 - n_total)
    p_h = float(special.chdtrc(len(groups) - 1, h))
    kw = TestReport(float(h), _clip_p(p_h), "kruskal-wallis", tuple(int(s) for s in sizes))

    k = len(groups)
    base_var = n_total * (n_total + 1) / 12.0 - tie_term / (12.0 * (n_total - 1))
    z = np.zeros((k, k))
    for i, j in itertools.permutations(range(k), 2):
        se = math.sqrt(base_var * (1.0 / sizes[i] + 1.0 / sizes[j]))
        z[i, j] = (mean_ranks[i] - mean_ranks[j]) / se
    p_raw = np.clip(2.0 * _norm_sf(np.abs(z)), 0.0, 1.0)
    p_adj = np.minimum(1.0, p_raw * (k * (k - 1) / 2))
    np.fill_diagonal(p_raw, 1.0)
    np.fill_diagonal(p_adj, 1.0)
    return KruskalDunnResult(kw, z, p_raw, p_adj, mean_ranks)


# -- Wilcoxon signed-rank ---------------------------------------------------------------

def signed_rank_null_counts(doubled_ranks) -> np.ndarray:
    """counts[s] = number of sign assignments whose doubled positive-rank sum is s."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a, b) -> TestReport:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    d = a - b
    d = d[d != 0]
    if len(d) == 0:
        raise AllZeroDifferences("every paired difference is zero")
    n = len(d)
    ranks, ties = rank_average(np.abs(d))
    t_plus = float(ranks[d > 0].sum())
    t_minus = float(ranks[d < 0].sum())
    statistic = min(t_plus, t_minus)
    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2 * ranks).astype(int)
        counts = signed_rank_null_counts(doubled)
        obs = int(round(2 * t_plus))
        total = 2 ** n
        lower = int(sum(counts[:obs + 1]))
        upper = int(sum(counts[obs:]))
        p = min(1.0, 2.0 * min(lower, upper) / total)
        name = "wilcoxon-exact"
    else:
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(ties ** 3 - ties)) / 48.0
        z = (t_plus - mean) / math.sqrt(var)
        p = float(2.0 * _norm_sf(abs(z)))
        name = "wilcoxon-normal"
    return TestReport(statistic, _clip_p(p), name, (n,))


# -- paired t -------------------------------------------------------------------------

def paired_t(a, b) -> TestReport:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    d = a - b
    n = len(d)
    if n < 2:
        raise SampleTooSmall("paired t needs at least two pairs")
    if np.ptp(d) == 0:
        raise ZeroVariance("differences have zero variance")
    sd = float(np.std(d, ddof=1))
    t = float(np.mean(d)) / (sd / math.sqrt(n))
    p = 2.0 * float(special.stdtr(n - 1, -abs(t)))
    return TestReport(t, _clip_p(p), "paired-t", (n,))
