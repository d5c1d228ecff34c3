"""Histograms, response matrices and iterative Bayesian unfolding (Richardson-Lucy).

The binned estimate of the truth spectrum is

    t = R^-1[(d - n) * acc] / eff

where ``*`` and ``/`` act bin by bin, ``acc[j]`` is the fraction of sim-bin-j
entries that have a generator-level partner and ``eff[i]`` the fraction of
gen-bin-i entries that have a detector-level partner.  The inversion of the
response ``R`` is done by the expectation-maximization iteration

    t <- t * R^T (d' / (R t)),

truncated after a fixed number of steps.  Only the first feature of each side
is binned.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import SyntheticSample


@dataclass(frozen=True, eq=False)
class Histogram:
    """1-D weighted histogram.  ``sumw2`` holds the per-bin sum of squared weights."""

    edges: np.ndarray
    contents: np.ndarray
    sumw2: np.ndarray | None = None
    underflow: float = 0.0
    overflow: float = 0.0

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64)
        contents = np.asarray(self.contents, dtype=np.float64)
        if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
            raise ValueError("edges must be strictly increasing with at least two entries")
        if contents.shape != (len(edges) - 1,):
            raise ValueError(f"{len(edges) - 1} bins but {contents.shape} contents")
        if not np.all(np.isfinite(contents)):
            raise ValueError("non-finite bin content")
        sumw2 = np.abs(contents) if self.sumw2 is None else np.asarray(self.sumw2, dtype=np.float64)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "contents", contents)
        object.__setattr__(self, "sumw2", sumw2)

    @property
    def n_bins(self) -> int:
        return len(self.contents)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def total(self) -> float:
        return float(self.contents.sum())

    def mean(self) -> float:
        """Mean of the bin centres weighted by the contents."""
        return float(np.dot(self.centers, self.contents) / self.contents.sum())

    def replace(self, contents, sumw2=None) -> "Histogram":
        return Histogram(self.edges, contents, sumw2)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["bin_lo", "bin_hi", "content"])
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.contents):
                wr.writerow([format(lo, ".17g"), format(hi, ".17g"), format(c, ".17g")])

    @classmethod
    def from_csv(cls, path) -> "Histogram":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or [h.strip() for h in rows[0]] != ["bin_lo", "bin_hi", "content"]:
            raise ValueError(f"{path}: expected header bin_lo,bin_hi,content")
        body = np.array([[float(v) for v in r] for r in rows[1:]])
        if len(body) == 0:
            raise ValueError(f"{path}: no bins")
        if not np.allclose(body[1:, 0], body[:-1, 1], rtol=0, atol=0):
            raise ValueError(f"{path}: bins are not contiguous")
        return cls(np.append(body[:, 0], body[-1, 1]), body[:, 2])


def bin_index(values, edges) -> np.ndarray:
    """Bin number of each value; -1 for underflow, ``len(edges) - 1`` for overflow.

    Bins are half-open ``[lo, hi)`` except the last, which includes its upper edge.
    """
    edges = np.asarray(edges, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    idx = np.searchsorted(edges, v, side="right") - 1
    idx[v == edges[-1]] = len(edges) - 2
    idx[v > edges[-1]] = len(edges) - 1
    return idx


def histogram(values, edges, weights=None) -> Histogram:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    w = np.ones_like(v) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(w) != len(v):
        raise ValueError("values and weights differ in length")
    nb = len(edges) - 1
    idx = bin_index(v, edges)
    inside = (idx >= 0) & (idx < nb)
    contents = np.bincount(idx[inside], weights=w[inside], minlength=nb)
    sumw2 = np.bincount(idx[inside], weights=w[inside] ** 2, minlength=nb)
    return Histogram(edges, contents, sumw2, float(w[idx < 0].sum()), float(w[idx >= nb].sum()))


@dataclass(frozen=True, eq=False)
class ResponseMatrix:
    """``matrix[j, i] = P(sim bin j | gen bin i)`` plus acceptance and efficiency.

    Pairs whose sim value falls outside ``sim_edges`` count as efficiency
    losses of their gen bin, and pairs whose gen value falls outside
    ``gen_edges`` as acceptance losses of their sim bin.
    """

    matrix: np.ndarray
    acceptance: np.ndarray
    efficiency: np.ndarray
    gen_edges: np.ndarray
    sim_edges: np.ndarray
    empty_columns: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.matrix, dtype=np.float64)
        ns, ng = len(self.sim_edges) - 1, len(self.gen_edges) - 1
        if r.shape != (ns, ng):
            raise ValueError(f"response shape {r.shape} does not match binning ({ns}, {ng})")

    @classmethod
    def from_matrix(cls, matrix, gen_edges=None, sim_edges=None, acceptance=None,
                    efficiency=None) -> "ResponseMatrix":
        """Wrap a given column-stochastic matrix (unit acceptance/efficiency by default)."""
        r = np.asarray(matrix, dtype=np.float64)
        ns, ng = r.shape
        gen_edges = np.arange(ng + 1.0) if gen_edges is None else np.asarray(gen_edges, float)
        sim_edges = np.arange(ns + 1.0) if sim_edges is None else np.asarray(sim_edges, float)
        acc = np.ones(ns) if acceptance is None else np.asarray(acceptance, float)
        eff = np.ones(ng) if efficiency is None else np.asarray(efficiency, float)
        return cls(r, acc, eff, gen_edges, sim_edges, r.sum(axis=0) == 0)

    def fold(self, gen_contents) -> np.ndarray:
        """Expected detector-level yield ``R (eff * t)`` of a gen-level spectrum."""
        return self.matrix @ (self.efficiency * np.asarray(gen_contents, dtype=np.float64))

    def to_csv(self, path) -> None:
        """Rows are sim bins; the header lists the gen-bin edges."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["sim_lo", "sim_hi", "acceptance"]
                        + [format(e, ".17g") for e in self.gen_edges])
            for j in range(self.matrix.shape[0]):
                wr.writerow([format(self.sim_edges[j], ".17g"), format(self.sim_edges[j + 1], ".17g"),
                             format(self.acceptance[j], ".17g")]
                            + [format(v, ".17g") for v in self.matrix[j]] + [""])
            wr.writerow(["efficiency", "", ""] + [format(v, ".17g") for v in self.efficiency] + [""])

    @classmethod
    def from_csv(cls, path) -> "ResponseMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        gen_edges = np.array([float(v) for v in rows[0][3:]])
        ng = len(gen_edges) - 1
        body = rows[1:-1]
        sim_edges = np.array([float(r[0]) for r in body] + [float(body[-1][1])])
        acc = np.array([float(r[2]) for r in body])
        mat = np.array([[float(v) for v in r[3:3 + ng]] for r in body])
        eff = np.array([float(v) for v in rows[-1][3:3 + ng]])
        return cls(mat, acc, eff, gen_edges, sim_edges, mat.sum(axis=0) == 0)


def estimate_response(synthetic: SyntheticSample, gen_edges, sim_edges,
                      weights=None) -> ResponseMatrix:
    """Response, acceptance and efficiency estimated from weighted synthetic pairs."""
    gen_edges = np.asarray(gen_edges, dtype=np.float64)
    sim_edges = np.asarray(sim_edges, dtype=np.float64)
    w = synthetic.weights if weights is None else np.asarray(weights, dtype=np.float64)
    ng, ns = len(gen_edges) - 1, len(sim_edges) - 1
    gi = np.where(synthetic.gen_mask, bin_index(synthetic.gen[:, 0], gen_edges), -1)
    si = np.where(synthetic.sim_mask, bin_index(synthetic.sim[:, 0], sim_edges), -1)
    g_in = synthetic.gen_mask & (gi >= 0) & (gi < ng)
    s_in = synthetic.sim_mask & (si >= 0) & (si < ns)
    both = g_in & s_in

    counts = np.zeros((ns, ng))
    np.add.at(counts, (si[both], gi[both]), w[both])
    col = counts.sum(axis=0)
    empty = col == 0
    matrix = np.divide(counts, col, out=np.zeros_like(counts), where=~empty)

    gen_total = np.bincount(gi[g_in], weights=w[g_in], minlength=ng)
    sim_total = np.bincount(si[s_in], weights=w[s_in], minlength=ns)
    efficiency = np.divide(col, gen_total, out=np.zeros(ng), where=gen_total != 0)
    acceptance = np.divide(counts.sum(axis=1), sim_total, out=np.zeros(ns), where=sim_total != 0)
    return ResponseMatrix(matrix, acceptance, efficiency, gen_edges, sim_edges, empty)


def prepare_data(data_hist: Histogram, noise_hist: Histogram | None,
                 response: ResponseMatrix) -> np.ndarray:
    """Background-subtracted, acceptance-corrected detector-level spectrum."""
    d = np.asarray(data_hist.contents, dtype=np.float64)
    if len(d) != response.matrix.shape[0]:
        raise ValueError("data binning does not match the response")
    if noise_hist is not None:
        d = d - noise_hist.contents
    if np.any(d < 0):
        warnings.warn(f"{int(np.sum(d < 0))} bins negative after background subtraction; "
                      "clipped to zero", RuntimeWarning, stacklevel=3)
        d = np.clip(d, 0.0, None)
    return d * response.acceptance


def ibu_iterates(data_hist: Histogram, noise_hist: Histogram | None, response: ResponseMatrix,
                 prior, n_iterations: int) -> list[Histogram]:
    """All iterates ``[t_1, ..., t_n]`` of the unfolding (efficiency-corrected)."""
    if n_iterations < 0:
        raise ValueError("n_iterations must be >= 0")
    d = prepare_data(data_hist, noise_hist, response)
    r = response.matrix
    eff = response.efficiency
    t = np.asarray(getattr(prior, "contents", prior), dtype=np.float64).copy()
    if t.shape != (r.shape[1],):
        raise ValueError("prior binning does not match the response")
    if np.any(t < 0):
        raise ValueError("prior must be non-negative")
    usable = (eff > 0) & ~response.empty_columns
    if np.any(~usable & (t > 0)):
        warnings.warn(f"{int(np.sum(~usable & (t > 0)))} gen bins have zero efficiency or no "
                      "response; excluded", RuntimeWarning, stacklevel=2)
    if np.any(usable & (t <= 0)):
        raise ValueError("prior must be strictly positive on bins with response")
    t = np.where(usable, t, 0.0)

    out = []
    for _ in range(n_iterations):
        mu = r @ t
        ratio = np.divide(d, mu, out=np.zeros_like(d), where=mu > 0)
        t = t * (r.T @ ratio)
        out.append(Histogram(response.gen_edges,
                             np.divide(t, eff, out=np.zeros_like(t), where=usable)))
    return out


def ibu(data_hist: Histogram, noise_hist: Histogram | None, response: ResponseMatrix,
        prior, n_iterations: int) -> Histogram:
    """Unfolded generator-level histogram after ``n_iterations`` EM steps."""
    if n_iterations == 0:
        return Histogram(response.gen_edges, getattr(prior, "contents", prior))
    return ibu_iterates(data_hist, noise_hist, response, prior, n_iterations)[-1]


def poisson_loglik(gen_hist, response: ResponseMatrix, data_hist) -> float:
    """``sum_j d_j log(mu_j) - mu_j`` with ``mu = R (eff * t)``.

    Constant ``log d_j!`` terms are dropped; ``0 log 0`` counts as 0.  A bin
    with ``mu_j = 0 < d_j`` makes the result ``-inf``.
    """
    t = np.asarray(getattr(gen_hist, "contents", gen_hist), dtype=np.float64)
    d = np.asarray(getattr(data_hist, "contents", data_hist), dtype=np.float64)
    mu = response.fold(t)
    if np.any((mu <= 0) & (d > 0)):
        return -np.inf
    pos = d > 0
    return float(np.sum(d[pos] * np.log(mu[pos])) - mu.sum())
