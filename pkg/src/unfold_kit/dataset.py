"""Event containers, Gaussian toy generators and CSV event files.

Gaussian parameters are ``(mean, width)`` where *width is the standard
deviation*, never the variance.

Synthetic pairs are stored column-wise in :class:`SyntheticSample`; a side
that does not exist for an event (acceptance or efficiency loss) is marked by
a presence flag and its feature cells are meaningless.  There is no numeric
sentinel value.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class EventFileError(ValueError):
    """Raised when an event CSV file does not match its schema."""


def _as_2d(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 1-D or 2-D, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class EventSet:
    """Weighted collection of feature vectors, shape ``(n, d)``.

    Negative weights are allowed (background samples enter with negative
    weight during subtraction).
    """

    x: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        x = _as_2d(self.x, "x")
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(x) != len(w):
            raise ValueError(f"{len(x)} events but {len(w)} weights")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite feature value")
        if not np.all(np.isfinite(w)):
            raise ValueError("non-finite weight")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "weights", w)

    @classmethod
    def unweighted(cls, x) -> "EventSet":
        x = _as_2d(x, "x")
        return cls(x, np.ones(len(x)))

    def __len__(self) -> int:
        return len(self.x)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())


@dataclass(frozen=True)
class PairedEvent:
    """One synthetic signal record.  ``None`` marks a missing side."""

    gen: tuple[float, ...] | None
    sim: tuple[float, ...] | None
    weight: float = 1.0

    def __post_init__(self):
        if self.gen is None and self.sim is None:
            raise ValueError("a paired event needs at least one of gen/sim")
        for side in (self.gen, self.sim):
            if side is not None and not all(math.isfinite(v) for v in side):
                raise ValueError("non-finite feature value")
        if not math.isfinite(self.weight):
            raise ValueError("non-finite weight")


@dataclass(frozen=True, eq=False)
class SyntheticSample:
    """Column-wise storage of paired generator/simulation events.

    ``gen`` has shape ``(n, dg)`` and ``sim`` shape ``(n, ds)``; rows whose
    mask entry is False are placeholders and are never read.
    """

    gen: np.ndarray
    sim: np.ndarray
    gen_mask: np.ndarray
    sim_mask: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        gen = _as_2d(self.gen, "gen")
        sim = _as_2d(self.sim, "sim")
        gm = np.asarray(self.gen_mask, dtype=bool).reshape(-1)
        sm = np.asarray(self.sim_mask, dtype=bool).reshape(-1)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        n = len(w)
        if not (len(gen) == len(sim) == len(gm) == len(sm) == n):
            raise ValueError("synthetic columns have inconsistent lengths")
        if n == 0:
            raise ValueError("empty synthetic sample")
        if np.any(~gm & ~sm):
            raise ValueError("event with neither gen nor sim side")
        if not np.all(np.isfinite(gen[gm])) or not np.all(np.isfinite(sim[sm])):
            raise ValueError("non-finite feature value")
        if not np.all(np.isfinite(w)):
            raise ValueError("non-finite weight")
        # placeholders are zeroed so that nothing downstream can depend on them
        gen = np.where(gm[:, None], gen, 0.0)
        sim = np.where(sm[:, None], sim, 0.0)
        for name, value in (("gen", gen), ("sim", sim), ("gen_mask", gm),
                            ("sim_mask", sm), ("weights", w)):
            object.__setattr__(self, name, value)

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def gen_dim(self) -> int:
        return self.gen.shape[1]

    @property
    def sim_dim(self) -> int:
        return self.sim.shape[1]

    @property
    def both_mask(self) -> np.ndarray:
        return self.gen_mask & self.sim_mask

    def to_events(self) -> list[PairedEvent]:
        out = []
        for i in range(len(self)):
            gen = tuple(self.gen[i].tolist()) if self.gen_mask[i] else None
            sim = tuple(self.sim[i].tolist()) if self.sim_mask[i] else None
            out.append(PairedEvent(gen, sim, float(self.weights[i])))
        return out

    @classmethod
    def from_events(cls, events, gen_dim: int | None = None,
                    sim_dim: int | None = None) -> "SyntheticSample":
        events = list(events)
        if not events:
            raise ValueError("empty synthetic sample")
        if gen_dim is None:
            gen_dim = next((len(e.gen) for e in events if e.gen is not None), 1)
        if sim_dim is None:
            sim_dim = next((len(e.sim) for e in events if e.sim is not None), 1)
        n = len(events)
        gen = np.zeros((n, gen_dim))
        sim = np.zeros((n, sim_dim))
        gm = np.zeros(n, dtype=bool)
        sm = np.zeros(n, dtype=bool)
        w = np.empty(n)
        for i, e in enumerate(events):
            if e.gen is not None:
                if len(e.gen) != gen_dim:
                    raise ValueError(f"event {i}: gen dimension {len(e.gen)} != {gen_dim}")
                gen[i] = e.gen
                gm[i] = True
            if e.sim is not None:
                if len(e.sim) != sim_dim:
                    raise ValueError(f"event {i}: sim dimension {len(e.sim)} != {sim_dim}")
                sim[i] = e.sim
                sm[i] = True
            w[i] = e.weight
        return cls(gen, sim, gm, sm, w)

    def with_weights(self, weights) -> "SyntheticSample":
        return SyntheticSample(self.gen, self.sim, self.gen_mask, self.sim_mask, weights)


# ---------------------------------------------------------------------------
# toy generators


@dataclass(frozen=True)
class ToyConfig:
    """Parameters of the Gaussian toy.  All widths are standard deviations.

    ``noise_width`` is the width of the zero-mean background law.
    ``n_aux_smearings`` splits the detector smearing into that many
    independent draws, each of width ``smear_width`` (0 means one draw).
    """

    truth_mean: float = 0.2
    truth_width: float = 0.8
    prior_mean: float = 0.0
    prior_width: float = 1.0
    smear_width: float = 0.5
    n_aux_smearings: int = 0
    noise_fraction: float = 0.1
    noise_width: float = 1.2
    acceptance_loss: float = 0.1
    efficiency_loss: float = 0.1
    n_events: int = 100_000
    seed: int = 0

    def __post_init__(self):
        for name in ("truth_mean", "truth_width", "prior_mean", "prior_width",
                     "smear_width", "noise_fraction", "noise_width",
                     "acceptance_loss", "efficiency_loss"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        for name in ("truth_width", "prior_width", "noise_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.smear_width < 0:
            raise ValueError("smear_width must be >= 0")
        for name in ("noise_fraction", "acceptance_loss", "efficiency_loss"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.n_aux_smearings < 0:
            raise ValueError("n_aux_smearings must be >= 0")
        if self.n_events < 1:
            raise ValueError("n_events must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @classmethod
    def multidim(cls, **overrides) -> "ToyConfig":
        """Defaults of the multi-feature study: no noise or losses."""
        base = dict(truth_mean=0.3, truth_width=0.5, prior_mean=0.0, prior_width=1.0,
                    smear_width=1.0, n_aux_smearings=4, noise_fraction=0.0,
                    acceptance_loss=0.0, efficiency_loss=0.0)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True, eq=False)
class ToyDataset:
    """Everything a toy generator produces.

    ``truth_holdout`` (generator-level truth of the data) and
    ``signal_data`` (detector-level data without background) are for
    validation only; an analysis of real data never has them.
    """

    data: EventSet
    synthetic: SyntheticSample
    noise_mc: EventSet | None = None
    truth_holdout: EventSet | None = None
    signal_data: EventSet | None = None
    data_is_noise: np.ndarray | None = None
    smearings: np.ndarray | None = field(default=None, repr=False)


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Independent counter-based stream for ``(seed, *stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


def _presence(rng, n_sim_present, acceptance_loss, efficiency_loss):
    """Presence flags for a sample with exactly ``n_sim_present`` sim entries.

    Each sim entry loses its gen partner with probability ``acceptance_loss``.
    Gen entries without a sim partner are then added so that each gen entry
    independently has no sim partner with probability ``efficiency_loss``:
    the count of such extras given ``m`` sim-matched gen entries is negative
    binomial.
    """
    gen_of_sim = rng.random(n_sim_present) >= acceptance_loss
    n_matched = int(gen_of_sim.sum())
    if efficiency_loss > 0 and n_matched > 0:
        n_extra = int(rng.negative_binomial(n_matched, 1.0 - efficiency_loss))
    else:
        n_extra = 0
    gen_mask = np.concatenate([gen_of_sim, np.ones(n_extra, dtype=bool)])
    sim_mask = np.concatenate([np.ones(n_sim_present, dtype=bool), np.zeros(n_extra, dtype=bool)])
    return gen_mask, sim_mask


def generate_gaussian_1d(config: ToyConfig, keep_smearings: bool = False) -> ToyDataset:
    """One-dimensional toy with background, acceptance and efficiency effects.

    The data hold ``n_events`` measured events, a binomial fraction
    ``noise_fraction`` of which come from the background law.  The synthetic
    sample holds ``n_events`` simulation-level entries drawn from the prior.
    ``noise_mc`` is an independent background sample of
    ``round(noise_fraction * n_events)`` unit-weight events.
    """
    c = config
    n = c.n_events
    rng_data = make_rng(c.seed, 0)
    rng_synth = make_rng(c.seed, 1)
    rng_noise = make_rng(c.seed, 2)

    is_noise = rng_data.random(n) < c.noise_fraction
    n_sig = int(n - is_noise.sum())
    gen_mask, sim_mask = _presence(rng_data, n_sig, c.acceptance_loss, c.efficiency_loss)
    truth = rng_data.normal(c.truth_mean, c.truth_width, len(gen_mask))
    z_data = rng_data.normal(0.0, c.smear_width, len(gen_mask))
    detected = (truth + z_data)[sim_mask]
    x_data = np.empty(n)
    x_data[~is_noise] = detected
    x_data[is_noise] = rng_data.normal(0.0, c.noise_width, n - n_sig)

    gm, sm = _presence(rng_synth, n, c.acceptance_loss, c.efficiency_loss)
    gen = rng_synth.normal(c.prior_mean, c.prior_width, len(gm))
    z_synth = rng_synth.normal(0.0, c.smear_width, len(gm))
    synthetic = SyntheticSample(gen, gen + z_synth, gm, sm, np.ones(len(gm)))

    n_noise_mc = int(round(c.noise_fraction * n))
    noise_mc = EventSet.unweighted(rng_noise.normal(0.0, c.noise_width, n_noise_mc))

    return ToyDataset(
        data=EventSet.unweighted(x_data),
        synthetic=synthetic,
        noise_mc=noise_mc,
        truth_holdout=EventSet.unweighted(truth[gen_mask]),
        signal_data=EventSet.unweighted(detected),
        data_is_noise=is_noise,
        smearings=z_synth if keep_smearings else None,
    )


def generate_gaussian_multidim(config: ToyConfig, n_observed_aux: int,
                               keep_smearings: bool = False) -> ToyDataset:
    """Toy where the smearing is a sum of ``n_aux_smearings`` draws.

    The detector-level vector is ``[x + sum(z), z[0], ..., z[n_observed_aux-1]]``;
    with every draw observed the truth is an exact function of it.
    """
    c = config
    if not 0 <= n_observed_aux <= c.n_aux_smearings:
        raise ValueError(f"n_observed_aux must lie in [0, {c.n_aux_smearings}]")
    if c.noise_fraction or c.acceptance_loss or c.efficiency_loss:
        raise ValueError("the multi-feature toy has no noise, acceptance or efficiency effects")
    n = c.n_events
    k = max(c.n_aux_smearings, 1)

    def draw(rng, mean, width):
        x = rng.normal(mean, width, n)
        z = rng.normal(0.0, c.smear_width, (n, k))
        det = np.column_stack([x + z.sum(axis=1), z[:, :n_observed_aux]])
        return x, z, det

    truth, _, x_data = draw(make_rng(c.seed, 0), c.truth_mean, c.truth_width)
    gen, z_synth, x_sim = draw(make_rng(c.seed, 1), c.prior_mean, c.prior_width)
    ones = np.ones(n, dtype=bool)
    return ToyDataset(
        data=EventSet.unweighted(x_data),
        synthetic=SyntheticSample(gen, x_sim, ones, ones, np.ones(n)),
        truth_holdout=EventSet.unweighted(truth),
        signal_data=EventSet.unweighted(x_data),
        data_is_noise=np.zeros(n, dtype=bool),
        smearings=z_synth if keep_smearings else None,
    )


# ---------------------------------------------------------------------------
# CSV files

def _g(v: float) -> str:
    return format(float(v), ".17g")


def write_events(path, events, event_ids=None) -> None:
    """Write an :class:`EventSet` (flat schema) or a :class:`SyntheticSample`
    (paired schema) to ``path``."""
    path = Path(path)
    if isinstance(events, SyntheticSample):
        _write_paired(path, events, event_ids)
    elif isinstance(events, EventSet):
        _write_flat(path, events, event_ids)
    else:
        raise TypeError(f"cannot write {type(events).__name__}")


def _ids(n, event_ids):
    return range(n) if event_ids is None else event_ids


def _write_flat(path: Path, es: EventSet, event_ids) -> None:
    header = ["event_id", "weight"] + [f"x{j}" for j in range(es.dim)]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for eid, w, row in zip(_ids(len(es), event_ids), es.weights, es.x):
            wr.writerow([eid, _g(w), *map(_g, row)])


def _write_paired(path: Path, s: SyntheticSample, event_ids) -> None:
    dg, ds = s.gen_dim, s.sim_dim
    header = (["event_id", "weight", "gen_present"] + [f"g{j}" for j in range(dg)]
              + ["sim_present"] + [f"s{j}" for j in range(ds)])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for i, eid in enumerate(_ids(len(s), event_ids)):
            g = list(map(_g, s.gen[i])) if s.gen_mask[i] else [""] * dg
            x = list(map(_g, s.sim[i])) if s.sim_mask[i] else [""] * ds
            wr.writerow([eid, _g(s.weights[i]), int(s.gen_mask[i]), *g,
                         int(s.sim_mask[i]), *x])


def _float(cell: str, row: int, col: str) -> float:
    if cell.strip() == "":
        raise EventFileError(f"row {row}: empty value in column {col!r}")
    try:
        v = float(cell)
    except ValueError:
        raise EventFileError(f"row {row}: cannot parse {cell!r} in column {col!r}") from None
    if not math.isfinite(v):
        raise EventFileError(f"row {row}: non-finite value in column {col!r}")
    return v


def _flag(cell: str, row: int, col: str) -> bool:
    if cell.strip() not in ("0", "1"):
        raise EventFileError(f"row {row}: {col} must be 0 or 1, got {cell!r}")
    return cell.strip() == "1"


def read_events(path, schema: str = "auto"):
    """Read an event CSV file.

    ``schema`` is ``"flat"`` (returns :class:`EventSet`), ``"paired"``
    (returns :class:`SyntheticSample`) or ``"auto"`` (decided by the header).
    Row numbers in errors count the header as row 1.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise EventFileError(f"{path}: missing header row")
    header = [h.strip() for h in rows[0]]
    if schema == "auto":
        schema = "paired" if "gen_present" in header else "flat"
    if schema == "flat":
        return _read_flat(header, rows[1:])
    if schema == "paired":
        return _read_paired(header, rows[1:])
    raise ValueError(f"unknown schema {schema!r}")


def _check_header(header, expected):
    if header != expected:
        raise EventFileError(f"row 1: header {header} does not match expected {expected}")


def _read_flat(header, rows) -> EventSet:
    d = len(header) - 2
    if d < 1:
        raise EventFileError("row 1: flat schema needs at least one feature column")
    _check_header(header, ["event_id", "weight"] + [f"x{j}" for j in range(d)])
    if not rows:
        raise EventFileError("file holds no events")
    x = np.empty((len(rows), d))
    w = np.empty(len(rows))
    for i, row in enumerate(rows):
        r = i + 2
        if len(row) != len(header):
            raise EventFileError(f"row {r}: expected {len(header)} columns, got {len(row)}")
        w[i] = _float(row[1], r, "weight")
        for j in range(d):
            x[i, j] = _float(row[2 + j], r, f"x{j}")
    return EventSet(x, w)


def _read_paired(header, rows) -> SyntheticSample:
    try:
        sp = header.index("sim_present")
    except ValueError:
        raise EventFileError("row 1: paired schema needs a sim_present column") from None
    dg = sp - 3
    ds = len(header) - sp - 1
    if dg < 1 or ds < 1:
        raise EventFileError("row 1: paired schema needs gen and sim feature columns")
    _check_header(header, ["event_id", "weight", "gen_present"] + [f"g{j}" for j in range(dg)]
                  + ["sim_present"] + [f"s{j}" for j in range(ds)])
    if not rows:
        raise EventFileError("file holds no events")
    n = len(rows)
    gen = np.zeros((n, dg))
    sim = np.zeros((n, ds))
    gm = np.zeros(n, dtype=bool)
    sm = np.zeros(n, dtype=bool)
    w = np.empty(n)
    for i, row in enumerate(rows):
        r = i + 2
        if len(row) != len(header):
            raise EventFileError(f"row {r}: expected {len(header)} columns, got {len(row)}")
        w[i] = _float(row[1], r, "weight")
        gm[i] = _flag(row[2], r, "gen_present")
        sm[i] = _flag(row[sp], r, "sim_present")
        if not (gm[i] or sm[i]):
            raise EventFileError(f"row {r}: neither gen nor sim present")
        for j in range(dg):
            cell = row[3 + j]
            if gm[i]:
                gen[i, j] = _float(cell, r, f"g{j}")
            elif cell.strip():
                raise EventFileError(f"row {r}: g{j} set but gen_present=0")
        for j in range(ds):
            cell = row[sp + 1 + j]
            if sm[i]:
                sim[i, j] = _float(cell, r, f"s{j}")
            elif cell.strip():
                raise EventFileError(f"row {r}: s{j} set but sim_present=0")
    return SyntheticSample(gen, sim, gm, sm, w)
