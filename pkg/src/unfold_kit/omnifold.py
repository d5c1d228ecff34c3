"""Iterative classifier-based unfolding with background, acceptance and efficiency handling.

One run does

  (i)  per-data-event background-subtraction weights ``w_D``: a classifier
       separates {data (weight 1)} + {noise MC (weight -w_noise)} from
       {data (weight 1)}; its ratio is the signal purity at each data point;

and then, ``n_iterations`` times,

  (a) Step I    reweight the simulation to the background-subtracted data;
  (b) miss-I    regress the Step I multiplier onto the generator-level
                features, for events that were never detected;
  (c) pull      attach the Step I multipliers to the generator-level events;
  (d) Step II   turn the pulled weights into a function of the
                generator-level features;
  (e) miss-II   regress the Step II multiplier onto the detector-level
                features, for detected events without a generator partner;
  (f) push      attach the Step II multipliers to the detector-level events;
  (g) the pushed weights become the synthetic weights of the next iteration.

Every step multiplies the current synthetic weight by the trained ratio
(``update="multiplicative"``).  ``update="literal"`` instead assigns the bare
ratio as the new weight; that form only agrees with the multiplicative one
in the first iteration and does not keep a matched simulation fixed.

Any object with a ``fit(role, iteration, x, weight_a, weight_b)`` method that
returns a ratio function can stand in for the neural reweighter;
:class:`HistogramReweighter` gives the exact binned version, which reproduces
iterative Bayesian unfolding.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn
from .binned import Histogram, bin_index, histogram
from .dataset import EventSet, SyntheticSample
from .stats import chi2_per_bin, effective_sample_size, weighted_mean

log = logging.getLogger(__name__)

ROLES = ("background", "step1", "miss1", "step2", "miss2")


class UnfoldError(RuntimeError):
    """A step of the unfolding failed; ``iteration`` and ``role`` locate it."""

    def __init__(self, message, iteration=None, role=None):
        super().__init__(message)
        self.iteration = iteration
        self.role = role


@dataclass(frozen=True)
class UnfoldConfig:
    """Settings of one unfolding run.

    The ``*_net`` entries configure the classifier of each role; their
    ``input_dim`` and ``seed`` are filled in at fit time (the seed is derived
    from ``seed``, the role and the iteration).

    With ``normalize_ratios`` every fitted ratio ``r`` is rescaled so that
    ``sum_B w_b r(x_b) = sum_A w_a``, which the exact density ratio satisfies;
    this removes the overall-scale jitter of the classifier's output bias.
    """

    n_iterations: int = 3
    step1_net: nn.NetworkConfig = nn.NetworkConfig()
    miss1_net: nn.NetworkConfig = nn.NetworkConfig()
    step2_net: nn.NetworkConfig = nn.NetworkConfig()
    miss2_net: nn.NetworkConfig = nn.NetworkConfig()
    background_net: nn.NetworkConfig = nn.NetworkConfig()
    w_max: float = 100.0
    enable_background: bool = True
    enable_acceptance: bool = True
    enable_efficiency: bool = True
    update: str = "multiplicative"
    miss_imputation: str = "average"
    normalize_ratios: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")
        if not self.w_max > 0:
            raise ValueError("w_max must be positive")
        if self.update not in ("multiplicative", "literal"):
            raise ValueError("update must be 'multiplicative' or 'literal'")
        if self.miss_imputation not in ("average", "unity"):
            raise ValueError("miss_imputation must be 'average' or 'unity'")

    def net(self, role: str) -> nn.NetworkConfig:
        return getattr(self, f"{role}_net")

    @classmethod
    def with_network(cls, network: nn.NetworkConfig, **kwargs) -> "UnfoldConfig":
        """Same network settings for every role."""
        nets = {f"{r}_net": network for r in ROLES}
        nets.update(kwargs)
        return cls(**nets)


def derive_seed(seed: int, role: str, iteration: int) -> int:
    ss = np.random.SeedSequence([seed, ROLES.index(role), iteration])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class Fit:
    ratio: Callable[[np.ndarray], np.ndarray]
    loss: float = float("nan")
    epochs: int = 0
    scale: float = 1.0


class NeuralReweighter:
    """Trains one :mod:`nn` classifier per (role, iteration)."""

    def __init__(self, cfg: UnfoldConfig):
        self.cfg = cfg

    def fit(self, role: str, iteration: int, x, weight_a, weight_b) -> Fit:
        net = self.cfg.net(role).replace(input_dim=x.shape[1],
                                         seed=derive_seed(self.cfg.seed, role, iteration))
        clf = nn.train_weighted(x, weight_a, weight_b, net)
        return Fit(clf.ratio, clf.val_loss[clf.best_epoch], len(clf.val_loss))


class HistogramReweighter:
    """Exact weighted-histogram ratio on the first feature.

    Detector-side roles (background, step1, miss2) bin on ``sim_edges`` and
    generator-side roles on ``gen_edges``; underflow and overflow are bins of
    their own.  A bin with empty denominator gets ratio 0.
    """

    def __init__(self, gen_edges, sim_edges):
        self.gen_edges = np.asarray(gen_edges, dtype=np.float64)
        self.sim_edges = np.asarray(sim_edges, dtype=np.float64)

    def fit(self, role, iteration, x, weight_a, weight_b) -> Fit:
        edges = self.gen_edges if role in ("miss1", "step2") else self.sim_edges
        nb = len(edges) + 1
        idx = bin_index(x[:, 0], edges) + 1
        a = np.bincount(idx, weights=weight_a, minlength=nb)
        b = np.bincount(idx, weights=weight_b, minlength=nb)
        ratio = np.divide(a, b, out=np.zeros(nb), where=b != 0)
        uncovered = (b == 0) & (a != 0)
        if np.any(uncovered):
            warnings.warn(f"{role}: {int(uncovered.sum())} bins have numerator but no "
                          "denominator support", RuntimeWarning, stacklevel=2)
        return Fit(lambda v: ratio[bin_index(np.asarray(v)[:, 0], edges) + 1])


@dataclass(eq=False)
class WeightState:
    """Weights of one iteration, one entry per synthetic event.

    ``w_synth`` holds the weights entering the iteration.  ``w_step1`` is zero
    for events without a detector-level side and ``w_step2`` for events
    without a generator-level side.  ``w_push`` is the next ``w_synth``.
    """

    iteration: int
    w_synth: np.ndarray
    w_step1: np.ndarray
    w_pull: np.ndarray
    w_step2: np.ndarray
    w_push: np.ndarray


@dataclass(eq=False)
class UnfoldResult:
    """Generator-level synthetic events and their weights after each iteration.

    ``gen`` and every weight accessor cover only events that have a
    generator-level side; ``event_ids`` are their row numbers in the
    synthetic sample.
    """

    gen: np.ndarray
    event_ids: np.ndarray
    w_data: np.ndarray
    initial_weights: np.ndarray
    states: list[WeightState] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)

    @property
    def n_iterations(self) -> int:
        return len(self.states)

    def weights_at(self, k: int | None = None) -> np.ndarray:
        """Unfolded weights after iteration ``k`` (default: last; 0: prior)."""
        k = self.n_iterations if k is None else k
        if k == 0:
            return self.initial_weights[self.event_ids]
        return self.states[k - 1].w_push[self.event_ids]

    @property
    def weights(self) -> np.ndarray:
        return self.weights_at()

    def mean(self, k: int | None = None, feature: int = 0) -> float:
        return weighted_mean(self.gen[:, feature], self.weights_at(k))

    def histogram(self, edges, k: int | None = None, feature: int = 0) -> Histogram:
        return histogram(self.gen[:, feature], edges, self.weights_at(k))

    def write_weights_csv(self, path) -> None:
        """``event_id,w_iter1,...,w_iterK`` for every generator-level event."""
        ks = range(1, self.n_iterations + 1)
        cols = [self.weights_at(k) for k in ks]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["event_id"] + [f"w_iter{k}" for k in ks])
            for row, eid in enumerate(self.event_ids):
                wr.writerow([int(eid)] + [format(c[row], ".17g") for c in cols])

    def diagnostics_report(self) -> dict:
        return {
            "n_iterations": self.n_iterations,
            "n_events": int(len(self.event_ids)),
            "sum_w_data": float(self.w_data.sum()),
            "iterations": _json_safe(self.diagnostics),
        }

    def write_diagnostics_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.diagnostics_report(), indent=2, sort_keys=True) + "\n")


def _json_safe(obj):
    """Non-finite floats become ``None`` so the report is strict JSON."""
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _fit(reweighter, role, k, x, wa, wb, normalize=True) -> Fit:
    try:
        fit = reweighter.fit(role, k, x, wa, wb)
    except nn.TrainingError as exc:
        raise UnfoldError(f"iteration {k}, {role}: {exc}", k, role) from exc
    if normalize:
        on_b = wb != 0
        denom = float(np.dot(wb[on_b], fit.ratio(x[on_b])))
        if denom > 0 and wa.sum() > 0:
            scale = float(wa.sum()) / denom
            raw = fit.ratio
            fit.ratio = lambda v: scale * raw(v)
            fit.scale = scale
    return fit


def subtract_background(data: EventSet, noise_mc: EventSet, cfg: UnfoldConfig,
                        reweighter=None) -> tuple[np.ndarray, Fit]:
    """Per-data-event signal weights in ``[0, 1]``.

    The weighted ratio of {data} - {noise} to {data} at each data point is
    the local signal purity, so the weights sum to about
    ``sum(data) - sum(noise)``.
    """
    reweighter = reweighter or NeuralReweighter(cfg)
    if noise_mc is None or len(noise_mc) == 0:
        raise UnfoldError("background subtraction enabled but the noise sample is empty",
                          0, "background")
    if noise_mc.dim != data.dim:
        raise ValueError(f"noise has {noise_mc.dim} features, data {data.dim}")
    if noise_mc.total_weight >= data.total_weight:
        raise ValueError("noise weight must be smaller than the data weight")
    x = np.concatenate([data.x, noise_mc.x])
    wa = np.concatenate([data.weights, -noise_mc.weights])
    wb = np.concatenate([data.weights, np.zeros(len(noise_mc))])
    fit = _fit(reweighter, "background", 0, x, wa, wb, cfg.normalize_ratios)
    return np.clip(fit.ratio(data.x), 0.0, 1.0), fit


def _factor(cfg: UnfoldConfig, w_synth):
    return w_synth if cfg.update == "multiplicative" else 1.0


def step1(synthetic: SyntheticSample, w_synth, data: EventSet, w_data, cfg: UnfoldConfig,
          reweighter=None, iteration: int = 1) -> tuple[np.ndarray, Fit]:
    """Ratio of background-subtracted data to weighted simulation at each ``x_S``.

    Returns a full-length array; entries of events without a detector-level
    side are NaN.
    """
    reweighter = reweighter or NeuralReweighter(cfg)
    sm = synthetic.sim_mask
    if not sm.any():
        raise UnfoldError("no synthetic event has a detector-level side", iteration, "step1")
    if data.dim != synthetic.sim_dim:
        raise ValueError(f"data has {data.dim} features, simulation {synthetic.sim_dim}")
    xs = synthetic.sim[sm]
    ns = len(xs)
    x = np.concatenate([data.x, xs])
    wa = np.concatenate([w_data, np.zeros(ns)])
    wb = np.concatenate([np.zeros(len(data)), w_synth[sm]])
    fit = _fit(reweighter, "step1", iteration, x, wa, wb, cfg.normalize_ratios)
    r = np.full(len(synthetic), np.nan)
    r[sm] = fit.ratio(xs)
    return r, fit


def pull(synthetic: SyntheticSample, r_step1, w_synth, cfg: UnfoldConfig,
         reweighter=None, iteration: int = 1) -> tuple[np.ndarray, Fit | None]:
    """Generator-side weights from the Step I multipliers.

    Events never detected get ``w_synth`` times the average Step I multiplier
    at their ``x_G`` (or times 1 with unity imputation).
    """
    reweighter = reweighter or NeuralReweighter(cfg)
    sm, both = synthetic.sim_mask, synthetic.both_mask
    if not sm.any():
        raise UnfoldError("no synthetic event has a detector-level side", iteration, "miss1")
    mult = np.ones(len(synthetic))
    mult[sm] = r_step1[sm]
    missing = synthetic.gen_mask & ~sm
    fit = None
    if missing.any() and cfg.enable_efficiency and cfg.miss_imputation == "average":
        if not both.any():
            raise UnfoldError("no event with both sides to impute efficiency losses",
                              iteration, "miss1")
        xg = synthetic.gen[both]
        fit = _fit(reweighter, "miss1", iteration, xg, r_step1[both], np.ones(len(xg)),
                   cfg.normalize_ratios)
        mult[missing] = fit.ratio(synthetic.gen[missing])
    return np.clip(_factor(cfg, w_synth) * mult, 0.0, cfg.w_max), fit


def step2(synthetic: SyntheticSample, w_pull, w_synth, cfg: UnfoldConfig,
          reweighter=None, iteration: int = 1) -> tuple[np.ndarray, Fit]:
    """Ratio of pulled to current weights as a function of ``x_G``.

    ``w_synth * r`` estimates the conditional mean of ``w_pull`` given
    ``x_G``.  Entries of events without a generator-level side are NaN.
    """
    reweighter = reweighter or NeuralReweighter(cfg)
    gm = synthetic.gen_mask
    if not gm.any():
        raise UnfoldError("no synthetic event has a generator-level side", iteration, "step2")
    xg = synthetic.gen[gm]
    fit = _fit(reweighter, "step2", iteration, xg, w_pull[gm], w_synth[gm], cfg.normalize_ratios)
    r = np.full(len(synthetic), np.nan)
    r[gm] = fit.ratio(xg)
    return r, fit


def push(synthetic: SyntheticSample, r_step2, w_synth, cfg: UnfoldConfig,
         reweighter=None, iteration: int = 1) -> tuple[np.ndarray, Fit | None]:
    """Detector-side weights from the Step II multipliers; these are the next ``w_synth``."""
    reweighter = reweighter or NeuralReweighter(cfg)
    gm, both = synthetic.gen_mask, synthetic.both_mask
    if not gm.any():
        raise UnfoldError("no synthetic event has a generator-level side", iteration, "miss2")
    mult = np.ones(len(synthetic))
    mult[gm] = r_step2[gm]
    missing = synthetic.sim_mask & ~gm
    fit = None
    if missing.any() and cfg.enable_acceptance and cfg.miss_imputation == "average":
        if not both.any():
            raise UnfoldError("no event with both sides to impute acceptance losses",
                              iteration, "miss2")
        xs = synthetic.sim[both]
        fit = _fit(reweighter, "miss2", iteration, xs, r_step2[both], np.ones(len(xs)),
                   cfg.normalize_ratios)
        mult[missing] = fit.ratio(synthetic.sim[missing])
    return np.clip(_factor(cfg, w_synth) * mult, 0.0, cfg.w_max), fit


def _detector_edges(data: EventSet, n_bins: int = 20) -> np.ndarray:
    lo, hi = np.quantile(data.x[:, 0], [0.005, 0.995])
    return np.linspace(lo, hi, n_bins + 1)


def run(data: EventSet, noise_mc: EventSet | None, synthetic: SyntheticSample,
        cfg: UnfoldConfig, reweighter=None) -> UnfoldResult:
    """Full unfolding: background subtraction once, then ``cfg.n_iterations`` iterations."""
    reweighter = reweighter or NeuralReweighter(cfg)
    if data.dim != synthetic.sim_dim:
        raise ValueError(f"data has {data.dim} features, simulation {synthetic.sim_dim}")
    if len(data) == 0:
        raise ValueError("empty data")

    if cfg.enable_background and noise_mc is not None and len(noise_mc) > 0:
        w_data, bg_fit = subtract_background(data, noise_mc, cfg, reweighter)
        bg_loss = bg_fit.loss
    elif cfg.enable_background and noise_mc is not None:
        raise UnfoldError("background subtraction enabled but the noise sample is empty",
                          0, "background")
    else:
        w_data, bg_loss = data.weights.copy(), float("nan")

    gm, sm = synthetic.gen_mask, synthetic.sim_mask
    w = np.clip(synthetic.weights.astype(np.float64), 0.0, cfg.w_max)
    result = UnfoldResult(gen=synthetic.gen[gm], event_ids=np.flatnonzero(gm),
                          w_data=w_data, initial_weights=w.copy())
    det_edges = _detector_edges(data)
    data_hist = histogram(data.x[:, 0], det_edges, w_data)

    for k in range(1, cfg.n_iterations + 1):
        r1, f1 = step1(synthetic, w, data, w_data, cfg, reweighter, k)
        w_step1 = np.where(sm, _factor(cfg, w) * np.nan_to_num(r1), 0.0)
        w_pull, fm1 = pull(synthetic, r1, w, cfg, reweighter, k)
        r2, f2 = step2(synthetic, w_pull, w, cfg, reweighter, k)
        w_step2 = np.where(gm, np.clip(_factor(cfg, w) * np.nan_to_num(r2), 0.0, cfg.w_max), 0.0)
        w_push, fm2 = push(synthetic, r2, w, cfg, reweighter, k)

        state = WeightState(k, w.copy(), w_step1, w_pull, w_step2, w_push)
        result.states.append(state)
        sim_hist = histogram(synthetic.sim[sm, 0], det_edges, w_step1[sm])
        rel = np.abs(w_push - w)[w > 0] / w[w > 0]
        result.diagnostics.append({
            "iteration": k,
            "loss": {"background": bg_loss, "step1": f1.loss, "step2": f2.loss,
                     "miss1": fm1.loss if fm1 else None, "miss2": fm2.loss if fm2 else None},
            "epochs": {"step1": f1.epochs, "step2": f2.epochs,
                       "miss1": fm1.epochs if fm1 else None, "miss2": fm2.epochs if fm2 else None},
            "ess": effective_sample_size(w_push[gm]),
            "chi2_per_bin_detector": chi2_per_bin(sim_hist, data_hist),
            "sum_w_step1": float(w_step1.sum()),
            "unfolded_mean": weighted_mean(synthetic.gen[gm, 0], w_push[gm]),
            "max_rel_change": float(rel.max()) if len(rel) else 0.0,
        })
        log.info("iteration %d: mean %.5f, detector chi2/bin %.3f", k,
                 result.diagnostics[-1]["unfolded_mean"],
                 result.diagnostics[-1]["chi2_per_bin_detector"])
        w = w_push
    return result


@dataclass(eq=False)
class BinnedResult:
    """Generator-level histograms after each iteration of :func:`run_binned`."""

    iterates: list[Histogram]
    events: UnfoldResult


def run_binned(data: EventSet, noise_mc: EventSet | None, synthetic: SyntheticSample,
               cfg: UnfoldConfig, gen_edges, sim_edges) -> BinnedResult:
    """:func:`run` with every classifier replaced by an exact histogram ratio."""
    rw = HistogramReweighter(gen_edges, sim_edges)
    res = run(data, noise_mc, synthetic, cfg, reweighter=rw)
    iterates = [res.histogram(gen_edges, k) for k in range(1, res.n_iterations + 1)]
    return BinnedResult(iterates, res)
