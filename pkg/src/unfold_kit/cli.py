"""Command-line entry point: ``unfold-kit <command> [--config PATH] [flags]``.

Commands
--------
generate   write a toy dataset (data, noise MC, synthetic pairs, truth) as CSV
unfold     run the classifier-based unfolding on CSV inputs
ibu        run binned iterative Bayesian unfolding on the same inputs
benchmark  ensemble study (``table1``) or the full 1-D study (``figure1``)
compare    exact histogram-ratio unfolding vs IBU (and optionally the neural run)

The configuration is a JSON object with the optional blocks ``toy``,
``network``, ``unfold``, ``binning``, ``benchmark``, ``compare`` and
``paths`` plus a top-level ``seed``; unknown keys are rejected.  ``--seed``
and ``--out`` override the file.  Every command writes ``run_config.json``,
the fully resolved configuration, next to its outputs.

Failures print a one-line JSON object on stderr and exit with
2 (configuration), 3 (file I/O) or 4 (algorithm).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import binned, experiments, nn, omnifold
from .dataset import (EventFileError, EventSet, SyntheticSample, ToyConfig, generate_gaussian_1d,
                      generate_gaussian_multidim, read_events, write_events)

EXIT_CONFIG, EXIT_IO, EXIT_ALGORITHM = 2, 3, 4

log = logging.getLogger("unfold_kit")


class ConfigError(ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class InputError(OSError):
    pass


_TOY_KEYS = {f.name for f in fields(ToyConfig)} - {"seed"} | {"kind", "n_observed_aux"}
_NET_KEYS = {f.name for f in fields(nn.NetworkConfig)} - {"input_dim", "seed"}
_UNFOLD_KEYS = {"n_iterations", "w_max", "enable_background", "enable_acceptance",
                "enable_efficiency", "update", "miss_imputation", "normalize_ratios"}
SCHEMA = {
    "seed": None,
    "toy": _TOY_KEYS,
    "network": _NET_KEYS,
    "unfold": _UNFOLD_KEYS,
    "binning": {"lo", "hi", "n_bins", "gen_edges", "sim_edges"},
    "benchmark": {"kind", "n_experiments", "n_events", "iterations", "n_features", "full",
                  "checkpoint"},
    "compare": {"neural", "threshold"},
    "paths": {"data", "noise_mc", "synthetic", "out"},
}
DEFAULTS = {
    "seed": 0,
    "toy": {"kind": "1d", "n_observed_aux": 0},
    "network": {},
    "unfold": {},
    "binning": {"lo": -3.0, "hi": 3.0, "n_bins": 20},
    "benchmark": {"kind": "table1", "n_experiments": 20, "iterations": [1, 2, 4, 8],
                  "n_features": [1, 2, 3, 4, 5], "full": False, "checkpoint": 3},
    "compare": {"neural": False, "threshold": 0.02},
    "paths": {"out": "out"},
}


# ---------------------------------------------------------------------------
# configuration

def load_config(path=None) -> dict:
    """Read and validate a configuration file; missing blocks get defaults."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise InputError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    cfg = json.loads(json.dumps(DEFAULTS))
    for key, value in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}", key)
        if SCHEMA[key] is None:
            cfg[key] = value
            continue
        if not isinstance(value, dict):
            raise ConfigError(f"block {key!r} must be an object", key)
        for sub in value:
            if sub not in SCHEMA[key]:
                raise ConfigError(f"unknown configuration key '{key}.{sub}'", f"{key}.{sub}")
        cfg[key].update(value)
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer", "seed")
    return cfg


def _build(kind, block: str, **kwargs):
    try:
        return kind(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {block!r} block: {exc}", block) from None


def toy_config(cfg: dict) -> tuple[ToyConfig, str, int]:
    toy = dict(cfg["toy"])
    kind = toy.pop("kind")
    n_obs = toy.pop("n_observed_aux")
    if kind == "1d":
        return _build(ToyConfig, "toy", seed=cfg["seed"], **toy), kind, n_obs
    if kind == "multidim":
        try:
            return ToyConfig.multidim(seed=cfg["seed"], **toy), kind, n_obs
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid 'toy' block: {exc}", "toy") from None
    raise ConfigError(f"toy.kind must be '1d' or 'multidim', got {kind!r}", "toy.kind")


def network_config(cfg: dict) -> nn.NetworkConfig:
    return _build(nn.NetworkConfig, "network", **cfg["network"])


def unfold_config(cfg: dict, **overrides) -> omnifold.UnfoldConfig:
    net = network_config(cfg)
    kw = {**cfg["unfold"], **overrides}
    try:
        return omnifold.UnfoldConfig.with_network(net, seed=cfg["seed"], **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid 'unfold' block: {exc}", "unfold") from None


def edges(cfg: dict) -> tuple[np.ndarray, np.ndarray]:
    b = cfg["binning"]
    try:
        default = np.linspace(float(b["lo"]), float(b["hi"]), int(b["n_bins"]) + 1)
        gen = np.asarray(b.get("gen_edges", default), dtype=np.float64)
        sim = np.asarray(b.get("sim_edges", default), dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid 'binning' block: {exc}", "binning") from None
    for name, e in (("gen", gen), ("sim", sim)):
        if e.ndim != 1 or len(e) < 2 or np.any(np.diff(e) <= 0) or not np.all(np.isfinite(e)):
            raise ConfigError(f"{name} bin edges must be finite and strictly increasing", "binning")
    return gen, sim


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# inputs

def _input_paths(cfg: dict, out: Path) -> dict[str, Path]:
    p = cfg["paths"]
    return {name: Path(p[name]) if name in p else out / f"{name}.csv"
            for name in ("data", "noise_mc", "synthetic")}


def load_inputs(cfg: dict, out: Path) -> tuple[EventSet, EventSet | None, SyntheticSample]:
    paths = _input_paths(cfg, out)
    for name in ("data", "synthetic"):
        if not paths[name].is_file():
            raise InputError(f"{name} file not found: {paths[name]}")
    data = read_events(paths["data"], "flat")
    synthetic = read_events(paths["synthetic"], "paired")
    noise = read_events(paths["noise_mc"], "flat") if paths["noise_mc"].is_file() else None
    if "noise_mc" in cfg["paths"] and noise is None:
        raise InputError(f"noise_mc file not found: {paths['noise_mc']}")
    return data, noise, synthetic


def _background(cfg: dict, noise: EventSet | None) -> bool:
    return bool(cfg["unfold"].get("enable_background", True)) and noise is not None


def _write_histograms(path: Path, hists: dict[str, binned.Histogram]) -> None:
    names = list(hists)
    first = hists[names[0]]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["bin_lo", "bin_hi"] + names)
        for b in range(first.n_bins):
            wr.writerow([format(first.edges[b], ".17g"), format(first.edges[b + 1], ".17g")]
                        + [format(hists[n].contents[b], ".17g") for n in names])


def _ibu_histograms(data, noise, synthetic, cfg, n_iterations):
    gen_edges, sim_edges = edges(cfg)
    response = binned.estimate_response(synthetic, gen_edges, sim_edges)
    data_hist = binned.histogram(data.x[:, 0], sim_edges, data.weights)
    noise_hist = (binned.histogram(noise.x[:, 0], sim_edges, noise.weights)
                  if _background(cfg, noise) else None)
    gm = synthetic.gen_mask
    prior = binned.histogram(synthetic.gen[gm, 0], gen_edges, synthetic.weights[gm])
    return response, prior, binned.ibu_iterates(data_hist, noise_hist, response, prior, n_iterations)


# ---------------------------------------------------------------------------
# commands

def cmd_generate(cfg: dict, out: Path, args) -> dict:
    toy, kind, n_obs = toy_config(cfg)
    if kind == "1d":
        ds = generate_gaussian_1d(toy)
    else:
        ds = generate_gaussian_multidim(toy, n_obs)
    written = {"data": ds.data, "synthetic": ds.synthetic, "truth": ds.truth_holdout,
               "signal_data": ds.signal_data}
    if ds.noise_mc is not None and len(ds.noise_mc):
        written["noise_mc"] = ds.noise_mc
    elif (out / "noise_mc.csv").exists():
        (out / "noise_mc.csv").unlink()
    for name, events in written.items():
        write_events(out / f"{name}.csv", events)
    return {"files": sorted(f"{n}.csv" for n in written), "n_data": len(ds.data),
            "n_synthetic": len(ds.synthetic)}


def cmd_unfold(cfg: dict, out: Path, args) -> dict:
    data, noise, synthetic = load_inputs(cfg, out)
    ucfg = unfold_config(cfg, enable_background=_background(cfg, noise))
    res = omnifold.run(data, noise, synthetic, ucfg)
    res.write_weights_csv(out / "weights.csv")
    res.write_diagnostics_json(out / "diagnostics.json")
    gen_edges, _ = edges(cfg)
    _write_histograms(out / "unfolded.csv",
                      {f"iter{k}": res.histogram(gen_edges, k) for k in range(res.n_iterations + 1)})
    return {"unfolded_mean": [res.mean(k) for k in range(1, res.n_iterations + 1)]}


def cmd_ibu(cfg: dict, out: Path, args) -> dict:
    data, noise, synthetic = load_inputs(cfg, out)
    n_it = unfold_config(cfg).n_iterations
    response, prior, iterates = _ibu_histograms(data, noise, synthetic, cfg, n_it)
    response.to_csv(out / "response.csv")
    hists = {"prior": prior}
    hists.update({f"iter{k}": h for k, h in enumerate(iterates, 1)})
    _write_histograms(out / "ibu.csv", hists)
    return {"unfolded_mean": [h.mean for h in iterates]}


def _l1(a, b) -> float:
    return float(np.abs(a.contents - b.contents).sum() / np.abs(b.contents).sum())


def cmd_compare(cfg: dict, out: Path, args) -> dict:
    data, noise, synthetic = load_inputs(cfg, out)
    gen_edges, sim_edges = edges(cfg)
    ucfg = unfold_config(cfg, enable_background=_background(cfg, noise))
    _, _, ibu_hists = _ibu_histograms(data, noise, synthetic, cfg, ucfg.n_iterations)
    exact = omnifold.run_binned(data, noise, synthetic, ucfg, gen_edges, sim_edges).iterates
    threshold = float(cfg["compare"]["threshold"])
    report = {"threshold": threshold, "iterations": []}
    neural = None
    if cfg["compare"]["neural"]:
        res = omnifold.run(data, noise, synthetic, ucfg)
        neural = [res.histogram(gen_edges, k) for k in range(1, res.n_iterations + 1)]
    hists = {}
    for k in range(ucfg.n_iterations):
        row = {"iteration": k + 1, "l1_binned_vs_ibu": _l1(exact[k], ibu_hists[k])}
        hists[f"ibu_iter{k + 1}"] = ibu_hists[k]
        hists[f"binned_iter{k + 1}"] = exact[k]
        if neural is not None:
            row["l1_neural_vs_ibu"] = _l1(neural[k], ibu_hists[k])
            hists[f"neural_iter{k + 1}"] = neural[k]
        report["iterations"].append(row)
    report["pass"] = all(r["l1_binned_vs_ibu"] < threshold for r in report["iterations"])
    _write_json(out / "compare.json", report)
    _write_histograms(out / "compare_histograms.csv", hists)
    return report


def cmd_benchmark(cfg: dict, out: Path, args) -> dict:
    b = cfg["benchmark"]
    if b["kind"] == "figure1":
        toy, kind, _ = toy_config(cfg)
        if kind != "1d":
            raise ConfigError("benchmark.kind 'figure1' needs toy.kind '1d'", "toy.kind")
        gen_edges, _ = edges(cfg)
        checkpoint = int(b["checkpoint"])
        ucfg = unfold_config(cfg, n_iterations=max(checkpoint + 1,
                                                   cfg["unfold"].get("n_iterations", 0)))
        bundle = experiments.run_figure1(toy, ucfg, checkpoint, gen_edges)
        bundle.write(out)
        return bundle.metrics
    if b["kind"] != "table1":
        raise ConfigError(f"benchmark.kind must be 'table1' or 'figure1', got {b['kind']!r}",
                          "benchmark.kind")
    toy_block = {k: v for k, v in cfg["toy"].items() if k not in ("kind", "n_observed_aux")}
    if "n_events" in b:
        toy_block["n_events"] = b["n_events"]
    try:
        base = ToyConfig.multidim(**toy_block)
        spec = experiments.EnsembleSpec(
            base=base, n_experiments=100 if b["full"] else int(b["n_experiments"]),
            iterations=tuple(b["iterations"]), n_features=tuple(b["n_features"]),
            network=network_config(cfg), jobs=args.jobs, seed=cfg["seed"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid 'benchmark' block: {exc}", "benchmark") from None
    report = experiments.run_table1(spec)
    report.to_json(out / "table1.json")
    (out / "table1.txt").write_text(report.to_text())
    return {"cells": len(report.cells)}


COMMANDS = {
    "generate": cmd_generate,
    "unfold": cmd_unfold,
    "ibu": cmd_ibu,
    "benchmark": cmd_benchmark,
    "compare": cmd_compare,
}


# ---------------------------------------------------------------------------
# main

def _jobs_default() -> int:
    env = os.environ.get("UNFOLD_KIT_THREADS")
    if env is None:
        return 1
    try:
        return max(1, int(env))
    except ValueError:
        raise ConfigError(f"UNFOLD_KIT_THREADS must be an integer, got {env!r}",
                          "UNFOLD_KIT_THREADS") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON configuration file")
    common.add_argument("--out", type=Path, help="output directory (overrides paths.out)")
    common.add_argument("--seed", type=int, help="base seed (overrides the config)")
    common.add_argument("--jobs", type=int, help="parallel replicates for benchmark "
                        "(default: $UNFOLD_KIT_THREADS or 1)")
    common.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(prog="unfold-kit", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__name__.replace("cmd_", ""))
    return parser


def _fail(kind: str, code: int, exc: BaseException, key=None) -> int:
    err = {"error": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code}
    if key is not None:
        err["key"] = key
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative", "seed")
            cfg["seed"] = args.seed
        if args.out is not None:
            cfg["paths"]["out"] = str(args.out)
        if args.jobs is None:
            args.jobs = _jobs_default()
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1", "jobs")
        out = Path(cfg["paths"]["out"])
        out.mkdir(parents=True, exist_ok=True)
        summary = COMMANDS[args.command](cfg, out, args)
        _write_json(out / "run_config.json", cfg)
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, exc, exc.key)
    except (InputError, EventFileError, OSError) as exc:
        return _fail("io", EXIT_IO, exc)
    except (omnifold.UnfoldError, nn.TrainingError, ValueError, RuntimeError,
            FloatingPointError) as exc:
        return _fail("algorithm", EXIT_ALGORITHM, exc)
    log.info("%s done: %s", args.command, json.dumps(summary, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
