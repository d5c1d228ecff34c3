"""Ensemble studies on the Gaussian toys.

:func:`run_table1` repeats the multi-feature unfolding over independent
replicates and tabulates the ensemble average and spread of the unfolded
mean; :func:`run_figure1` runs the full one-dimensional pipeline once and
collects the detector- and generator-level histograms.

Uncertainties on the ensemble statistics use the usual large-sample
formulas: ``std / sqrt(n)`` for the mean and ``std / sqrt(2 (n - 1))`` for
the standard deviation.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .binned import Histogram, histogram
from .dataset import ToyConfig, generate_gaussian_1d, generate_gaussian_multidim
from .nn import NetworkConfig
from .omnifold import UnfoldConfig, run
from .stats import chi2_per_bin, l1_distance, weighted_hist, weighted_mean

__all__ = [
    "EnsembleSpec", "EnsembleReport", "CellStats", "run_table1", "run_figure1",
    "Figure1Bundle", "load_reference", "weighted_mean", "weighted_hist", "chi2_per_bin",
]

log = logging.getLogger(__name__)


def load_reference() -> dict:
    """Published Table-style reference values shipped with the package."""
    text = resources.files("unfold_kit").joinpath("data/table1_reference.json").read_text()
    return json.loads(text)


@dataclass(frozen=True)
class EnsembleSpec:
    base: ToyConfig = field(default_factory=ToyConfig.multidim)
    n_experiments: int = 20
    iterations: tuple[int, ...] = (1, 2, 4, 8)
    n_features: tuple[int, ...] = (1, 2, 3, 4, 5)
    network: NetworkConfig = NetworkConfig()
    jobs: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "iterations", tuple(sorted(int(k) for k in self.iterations)))
        object.__setattr__(self, "n_features", tuple(int(n) for n in self.n_features))
        if self.n_experiments < 2:
            raise ValueError("n_experiments must be >= 2")
        if not self.iterations or self.iterations[0] < 1:
            raise ValueError("iteration checkpoints must be >= 1")
        for n in self.n_features:
            if not 1 <= n <= self.base.n_aux_smearings + 1:
                raise ValueError(f"feature count {n} outside [1, {self.base.n_aux_smearings + 1}]")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")


@dataclass(frozen=True)
class CellStats:
    n_features: int
    iteration: int
    mean: float
    std: float
    mean_err: float
    std_err: float
    values: tuple[float, ...]


def _replicate_seeds(seed: int, n_features: int, replicate: int) -> tuple[int, int]:
    data_seed, unfold_seed = np.random.SeedSequence([seed, n_features, replicate]).generate_state(
        2, dtype=np.uint32)
    return int(data_seed), int(unfold_seed)


def _run_replicate(spec: EnsembleSpec, n_features: int, replicate: int) -> list[float]:
    data_seed, unfold_seed = _replicate_seeds(spec.seed, n_features, replicate)
    config = ToyConfig(**{**asdict(spec.base), "seed": data_seed})
    ds = generate_gaussian_multidim(config, n_features - 1)
    cfg = UnfoldConfig.with_network(spec.network, n_iterations=max(spec.iterations),
                                    enable_background=False, seed=unfold_seed)
    try:
        res = run(ds.data, None, ds.synthetic, cfg)
    except Exception as exc:
        raise RuntimeError(f"N={n_features}, replicate {replicate}: {exc}") from exc
    means = [res.mean(k) for k in spec.iterations]
    log.info("N=%d replicate %d: %s", n_features, replicate, np.round(means, 4))
    return means


def _task(args):
    return _run_replicate(*args)


@dataclass(eq=False)
class EnsembleReport:
    spec: EnsembleSpec
    cells: dict[tuple[int, int], CellStats]
    reference: dict | None = None

    def cell(self, n_features: int, iteration: int) -> CellStats:
        return self.cells[(n_features, iteration)]

    def consistent_with_truth(self, n_features: int, iteration: int, nsigma: float = 2.0) -> bool:
        """Ensemble mean within ``nsigma`` standard errors of the true mean."""
        c = self.cell(n_features, iteration)
        return abs(c.mean - self.spec.base.truth_mean) <= nsigma * c.mean_err

    def matches_reference(self, n_features: int, iteration: int, nsigma: float = 3.0) -> bool | None:
        """Ensemble mean within ``nsigma`` combined errors of the reference value."""
        if self.reference is None:
            return None
        key = str(n_features)
        try:
            j = self.reference["iterations"].index(iteration)
            ref = self.reference["mean_x100"][key][j] / 100
            ref_err = self.reference["mean_err_x100"][key][j] / 100
        except (KeyError, ValueError):
            return None
        c = self.cell(n_features, iteration)
        return abs(c.mean - ref) <= nsigma * math.hypot(c.mean_err, ref_err)

    def bias_decreasing(self, n_features: int, nsigma: float = 2.0) -> bool:
        """``|mean - truth|`` shrinks from checkpoint to checkpoint (up to noise)."""
        truth = self.spec.base.truth_mean
        cs = [self.cell(n_features, k) for k in self.spec.iterations]
        return all(abs(b.mean - truth) < abs(a.mean - truth) + nsigma * math.hypot(a.mean_err, b.mean_err)
                   for a, b in zip(cs, cs[1:]))

    def std_nonincreasing_in_features(self, iteration: int, nsigma: float = 2.0) -> bool:
        ns = sorted(self.spec.n_features)
        cs = [self.cell(n, iteration) for n in ns]
        return all(b.std <= a.std + nsigma * math.hypot(a.std_err, b.std_err)
                   for a, b in zip(cs, cs[1:]))

    def to_dict(self) -> dict:
        cells = []
        for (n, k), c in sorted(self.cells.items()):
            cells.append({
                "n_features": n, "iteration": k, "mean": c.mean, "std": c.std,
                "mean_err": c.mean_err, "std_err": c.std_err, "values": list(c.values),
                "consistent_with_truth": self.consistent_with_truth(n, k),
                "matches_reference": self.matches_reference(n, k),
            })
        return {
            "n_experiments": self.spec.n_experiments,
            "n_events": self.spec.base.n_events,
            "truth_mean": self.spec.base.truth_mean,
            "iterations": list(self.spec.iterations),
            "n_features": list(self.spec.n_features),
            "cells": cells,
            "trends": {
                "bias_decreasing": {str(n): self.bias_decreasing(n) for n in self.spec.n_features},
                "std_nonincreasing_in_features": {
                    str(k): self.std_nonincreasing_in_features(k) for k in self.spec.iterations},
            },
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_text(self) -> str:
        """Plain-text table: unfolded-mean average (x100) and spread (x1000)."""
        ks = self.spec.iterations
        head = "".join(f"{k:>11}" for k in ks)
        lines = [f"{'':3}{'mean of x (x10^2)':>{11 * len(ks)}} | {'std of x (x10^3)':>{11 * len(ks)}}",
                 f"{'N':>3}{head} | {head}"]
        for n in self.spec.n_features:
            left = "".join(f"{_paren(self.cell(n, k).mean * 100, self.cell(n, k).mean_err * 100, 2):>11}"
                           for k in ks)
            right = "".join(f"{_paren(self.cell(n, k).std * 1000, self.cell(n, k).std_err * 1000, 1):>11}"
                            for k in ks)
            lines.append(f"{n:>3}{left} | {right}")
        return "\n".join(lines) + "\n"


def _paren(value: float, err: float, decimals: int) -> str:
    """``21.62(8)`` style: the error in units of the last shown digit."""
    digits = max(1, int(round(err * 10 ** decimals)))
    return f"{value:.{decimals}f}({digits})"


def run_table1(spec: EnsembleSpec, reference: dict | None = None) -> EnsembleReport:
    """Ensemble of multi-feature unfoldings; deterministic for any ``spec.jobs``."""
    tasks = [(spec, n, r) for n in spec.n_features for r in range(spec.n_experiments)]
    if spec.jobs == 1:
        results = [_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            results = list(pool.map(_task, tasks))

    cells = {}
    n = spec.n_experiments
    for i, n_feat in enumerate(spec.n_features):
        block = np.array(results[i * n:(i + 1) * n])
        for j, k in enumerate(spec.iterations):
            vals = block[:, j]
            std = float(vals.std(ddof=1))
            cells[(n_feat, k)] = CellStats(n_feat, k, float(vals.mean()), std, std / math.sqrt(n),
                                           std / math.sqrt(2 * (n - 1)), tuple(vals.tolist()))
    return EnsembleReport(spec, cells, load_reference() if reference is None else reference)


@dataclass(eq=False)
class Figure1Bundle:
    """Histograms of the one-dimensional study and the agreement metrics.

    ``detector`` and ``generator`` map a series name to a :class:`Histogram`.
    """

    detector: dict[str, Histogram]
    generator: dict[str, Histogram]
    metrics: dict[str, float]
    checkpoint: int

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, group in (("detector", self.detector), ("generator", self.generator)):
            _write_bundle(out / f"figure1_{name}.csv", group)
        (out / "figure1_metrics.json").write_text(json.dumps(self.metrics, indent=2, sort_keys=True) + "\n")


def _write_bundle(path: Path, group: dict[str, Histogram]) -> None:
    names = list(group)
    first = group[names[0]]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["bin_lo", "bin_hi"] + names)
        for b in range(first.n_bins):
            wr.writerow([format(first.edges[b], ".17g"), format(first.edges[b + 1], ".17g")]
                        + [format(group[n].contents[b], ".17g") for n in names])


def run_figure1(config: ToyConfig | None = None, unfold: UnfoldConfig | None = None,
                checkpoint: int = 3, edges=None) -> Figure1Bundle:
    """Full 1-D pipeline; metrics compare iteration ``checkpoint`` with its successor."""
    config = ToyConfig() if config is None else config
    edges = np.linspace(-3, 3, 21) if edges is None else np.asarray(edges, dtype=np.float64)
    unfold = UnfoldConfig(n_iterations=checkpoint + 1) if unfold is None else unfold
    if unfold.n_iterations < checkpoint + 1:
        raise ValueError("unfold.n_iterations must exceed the checkpoint")
    ds = generate_gaussian_1d(config)
    res = run(ds.data, ds.noise_mc, ds.synthetic, unfold)
    syn = ds.synthetic
    sm, gm = syn.sim_mask, syn.gen_mask
    state = res.states[checkpoint - 1]

    detector = {
        "data": histogram(ds.data.x[:, 0], edges),
        "noise_mc": histogram(ds.noise_mc.x[:, 0], edges, ds.noise_mc.weights),
        "data_noiseless": histogram(ds.signal_data.x[:, 0], edges),
        "data_subtracted": histogram(ds.data.x[:, 0], edges, res.w_data),
        "sim_prior": histogram(syn.sim[sm, 0], edges, syn.weights[sm]),
        f"sim_step1_k{checkpoint}": histogram(syn.sim[sm, 0], edges, state.w_step1[sm]),
    }
    generator = {
        "gen_prior": histogram(syn.gen[gm, 0], edges, syn.weights[gm]),
        "truth": histogram(ds.truth_holdout.x[:, 0], edges),
        f"unfolded_k{checkpoint}": res.histogram(edges, checkpoint),
        f"unfolded_k{checkpoint + 1}": res.histogram(edges, checkpoint + 1),
    }
    metrics = {
        "chi2_subtracted_vs_noiseless": chi2_per_bin(detector["data_subtracted"],
                                                     detector["data_noiseless"]),
        "chi2_sim_vs_subtracted": chi2_per_bin(detector[f"sim_step1_k{checkpoint}"],
                                               detector["data_subtracted"]),
        "chi2_unfolded_vs_truth": chi2_per_bin(generator[f"unfolded_k{checkpoint}"],
                                               generator["truth"]),
        "l1_next_iteration": l1_distance(generator[f"unfolded_k{checkpoint + 1}"],
                                         generator[f"unfolded_k{checkpoint}"]),
        "unfolded_mean": res.mean(checkpoint),
        "truth_mean": weighted_mean(ds.truth_holdout.x[:, 0]),
    }
    return Figure1Bundle(detector, generator, metrics, checkpoint)
