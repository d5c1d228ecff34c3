"""Weighted summary statistics shared by the unfolding diagnostics and the experiments."""

from __future__ import annotations

import numpy as np

from .binned import Histogram, histogram


def weighted_mean(values, weights=None) -> float:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if weights is None:
        return float(v.mean())
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    total = w.sum()
    if total == 0:
        raise ValueError("total weight is zero")
    return float(np.dot(v, w) / total)


def weighted_hist(values, edges, weights=None) -> Histogram:
    return histogram(values, edges, weights)


def effective_sample_size(weights) -> float:
    """Kish effective sample size ``(sum w)^2 / sum w^2``."""
    w = np.asarray(weights, dtype=np.float64)
    s2 = float(np.dot(w, w))
    return float(w.sum() ** 2 / s2) if s2 > 0 else 0.0


def chi2_per_bin(a: Histogram, b: Histogram, correlated: bool = False) -> float:
    """Mean over bins of ``(a - b)^2 / var``.

    The variance of a bin is its sum of squared weights (the effective-count
    Poisson variance), summed over the two histograms.  With
    ``correlated=True`` only ``b``'s variance is used, for comparisons where
    ``a`` is derived from the same events.  Bins with zero variance are
    skipped.
    """
    if not np.array_equal(a.edges, b.edges):
        raise ValueError("histograms have different binning")
    var = b.sumw2 if correlated else a.sumw2 + b.sumw2
    use = var > 0
    if not np.any(use):
        raise ValueError("all bins empty")
    return float(np.sum((a.contents[use] - b.contents[use]) ** 2 / var[use]) / use.sum())


def l1_distance(a, b) -> float:
    """``sum |a - b| / sum |b|`` over bin contents."""
    a = np.asarray(getattr(a, "contents", a), dtype=np.float64)
    b = np.asarray(getattr(b, "contents", b), dtype=np.float64)
    return float(np.abs(a - b).sum() / np.abs(b).sum())
