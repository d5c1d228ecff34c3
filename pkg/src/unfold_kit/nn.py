"""Weighted binary classifier used as a likelihood-ratio estimator.

A small fully connected network (ReLU hidden layers, sigmoid output) is
trained by Adam on the weighted cross entropy

    L = -sum_a w_a log g(a) - sum_b w_b log(1 - g(b)),

and ``g / (1 - g)`` then approximates the ratio of the weighted densities of
class A and class B.  Everything here is plain numpy with hand-written
backpropagation.

Internally a training set is a single array of points where each point has a
class-A weight and a class-B weight.  A point that belongs to both classes
(the same feature vector reweighted two ways) is stored once, which halves
the work for the pull/push and Step II fits.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .dataset import EventSet

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int = 1
    hidden_layers: tuple[int, ...] = (50, 50, 50)
    epochs: int = 200
    batch_size: int = 2000
    patience: int = 10
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-7
    validation_fraction: float = 0.2
    ratio_clamp_epsilon: float = 1e-5
    # decay of the running parameter average used for monitoring and as the
    # returned network; 0 disables it
    ema_decay: float = 0.99
    # float32 is ~2x faster for training; gradient checks use float64
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if any(h < 1 for h in self.hidden_layers):
            raise ValueError("hidden layer widths must be >= 1")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs, batch_size and patience must be >= 1")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        if not 0 < self.ratio_clamp_epsilon < 0.5:
            raise ValueError("ratio_clamp_epsilon must lie in (0, 0.5)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def replace(self, **changes) -> "NetworkConfig":
        return NetworkConfig(**{**asdict(self), **changes})


@dataclass(eq=False)
class Classifier:
    """Network parameters plus the input standardization and training record.

    Inputs are standardized as ``(x - shift) / scale`` before the first layer;
    the shift and scale are fixed from the training sample and are not
    trained.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    shift: np.ndarray
    scale: np.ndarray
    config: NetworkConfig
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None] if self.input_dim == 1 else x[None, :]
        if x.shape[1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim} features, got {x.shape[1]}")
        return x

    def logits(self, x) -> np.ndarray:
        x = self._check(x)
        h = ((x - self.shift) / self.scale).astype(self.weights[0].dtype)
        out = np.empty(len(h))
        # chunked so that evaluation on 1e6 points does not hold large activations
        for i in range(0, len(h), 65536):
            out[i:i + 65536] = _forward(self, h[i:i + 65536])[-1][:, 0]
        return out

    def predict_proba(self, x) -> np.ndarray:
        """Classifier output, strictly inside (0, 1)."""
        p = expit(self.logits(x))
        return np.clip(p, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))

    def ratio(self, x) -> np.ndarray:
        """``f / (1 - f)`` with ``f`` clamped to ``[eps, 1 - eps]``."""
        eps = self.config.ratio_clamp_epsilon
        f = np.clip(expit(self.logits(x)), eps, 1.0 - eps)
        return f / (1.0 - f)

    def to_dict(self) -> dict:
        cfg = asdict(self.config)
        cfg["hidden_layers"] = list(cfg["hidden_layers"])
        return {
            "type": "unfold_kit.Classifier",
            "config": cfg,
            "shift": self.shift.tolist(),
            "scale": self.scale.tolist(),
            "weights": [w.astype(np.float64).tolist() for w in self.weights],
            "biases": [b.astype(np.float64).tolist() for b in self.biases],
            "train_loss": list(self.train_loss),
            "val_loss": list(self.val_loss),
            "best_epoch": self.best_epoch,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Classifier":
        config = NetworkConfig(**d["config"])
        dt = np.dtype(config.dtype)
        return cls(
            weights=[np.asarray(w, dtype=dt) for w in d["weights"]],
            biases=[np.asarray(b, dtype=dt) for b in d["biases"]],
            shift=np.asarray(d["shift"], dtype=np.float64),
            scale=np.asarray(d["scale"], dtype=np.float64),
            config=config,
            train_loss=list(d.get("train_loss", [])),
            val_loss=list(d.get("val_loss", [])),
            best_epoch=int(d.get("best_epoch", -1)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Classifier":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_classifier(config: NetworkConfig, rng: np.random.Generator | None = None,
                    shift=None, scale=None) -> Classifier:
    """Random network: He-uniform weights ``U(-sqrt(6/fan_in), +)``, zero biases."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    dt = np.dtype(config.dtype)
    sizes = [config.input_dim, *config.hidden_layers, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-lim, lim, (fan_in, fan_out)).astype(dt))
        biases.append(np.zeros(fan_out, dtype=dt))
    d = config.input_dim
    shift = np.zeros(d) if shift is None else np.asarray(shift, dtype=np.float64)
    scale = np.ones(d) if scale is None else np.asarray(scale, dtype=np.float64)
    return Classifier(weights, biases, shift, scale, config)


def _forward(clf: Classifier, h: np.ndarray) -> list[np.ndarray]:
    """Activations of every layer; the last entry holds the logits."""
    acts = [h]
    last = len(clf.weights) - 1
    for i, (w, b) in enumerate(zip(clf.weights, clf.biases)):
        h = h @ w
        h += b
        if i < last:
            np.maximum(h, 0, out=h)
        acts.append(h)
    return acts


def _softplus(z):
    return np.logaddexp(0.0, z)


def _loss_and_grad(clf: Classifier, h: np.ndarray, wa: np.ndarray, wb: np.ndarray,
                   norm: float = 1.0, want_grad: bool = True):
    """Weighted BCE summed over points (divided by ``norm``) and its gradient.

    ``h`` is already standardized and cast to the parameter dtype.
    """
    acts = _forward(clf, h)
    z = acts[-1][:, 0]
    # -log g = softplus(-z), -log(1 - g) = softplus(z)
    loss = float(np.dot(wa, _softplus(-z)) + np.dot(wb, _softplus(z))) / norm
    if not want_grad:
        return loss, None
    dt = h.dtype
    dz = ((wb * expit(z) - wa * expit(-z)) / norm).astype(dt)[:, None]
    n_layers = len(clf.weights)
    grads: list[np.ndarray] = [None] * (2 * n_layers)
    delta = dz
    for i in range(n_layers - 1, -1, -1):
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ clf.weights[i].T
            delta *= acts[i] > 0
    return loss, grads


def _standardized(clf: Classifier, x: np.ndarray) -> np.ndarray:
    return ((x - clf.shift) / clf.scale).astype(clf.weights[0].dtype)


def _stack(A: EventSet, B: EventSet, input_dim: int):
    for name, s in (("A", A), ("B", B)):
        if s.dim != input_dim:
            raise ValueError(f"class {name} has dimension {s.dim}, classifier expects {input_dim}")
    x = np.concatenate([A.x, B.x])
    wa = np.concatenate([A.weights, np.zeros(len(B))])
    wb = np.concatenate([np.zeros(len(A)), B.weights])
    return x, wa, wb


def weighted_bce_loss(clf: Classifier, A: EventSet, B: EventSet) -> float:
    """Negated weighted log-likelihood of the two classes (a sum, not a mean)."""
    x, wa, wb = _stack(A, B, clf.input_dim)
    dt = clf.weights[0].dtype
    loss, _ = _loss_and_grad(clf, _standardized(clf, x), wa.astype(dt), wb.astype(dt),
                             want_grad=False)
    return loss


def loss_gradient(clf: Classifier, A: EventSet, B: EventSet) -> list[np.ndarray]:
    """Gradient of :func:`weighted_bce_loss`, ordered like ``clf.params``."""
    x, wa, wb = _stack(A, B, clf.input_dim)
    dt = clf.weights[0].dtype
    _, grads = _loss_and_grad(clf, _standardized(clf, x), wa.astype(dt), wb.astype(dt))
    return grads


class _Adam:
    def __init__(self, params, cfg: NetworkConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        c = self.cfg
        self.t += 1
        lr_t = c.learning_rate * np.sqrt(1 - c.beta2 ** self.t) / (1 - c.beta1 ** self.t)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * (g * g)
            p -= (lr_t * m / (np.sqrt(v) + c.adam_epsilon)).astype(p.dtype)


def train_weighted(x, weight_a, weight_b, config: NetworkConfig) -> Classifier:
    """Fit the classifier on points carrying a class-A and a class-B weight.

    The validation split, the initialization and the batch order all come
    from ``config.seed``.  Training stops after ``patience`` epochs without
    a new best validation loss and the best parameters are restored.  With
    ``ema_decay > 0`` the validation loss is that of an exponential moving
    average of the parameters, and that average is what gets returned.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    wa = np.asarray(weight_a, dtype=np.float64)
    wb = np.asarray(weight_b, dtype=np.float64)
    if x.shape[1] != config.input_dim:
        raise ValueError(f"data has {x.shape[1]} features, config expects {config.input_dim}")
    if not (len(x) == len(wa) == len(wb)):
        raise ValueError("features and weights differ in length")
    if len(x) < 2:
        raise ValueError("need at least two training points")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(wa)) and np.all(np.isfinite(wb))):
        raise ValueError("non-finite training input")

    rng = np.random.default_rng(config.seed)
    scale = x.std(axis=0)
    clf = init_classifier(config, rng, shift=x.mean(axis=0),
                          scale=np.where(scale > 0, scale, 1.0))
    dt = clf.weights[0].dtype

    n_val = min(max(1, int(round(config.validation_fraction * len(x)))), len(x) - 1)
    perm = rng.permutation(len(x))
    val, train = perm[:n_val], perm[n_val:]
    h = _standardized(clf, x)
    wa_t, wb_t = wa.astype(dt), wb.astype(dt)
    h_val, wa_val, wb_val = h[val], wa_t[val], wb_t[val]
    # per-point normalization keeps Adam's epsilon meaningful across sample sizes
    val_norm = float(n_val)

    params = clf.params
    opt = _Adam(params, config)
    # the monitored (and returned) network is the running parameter average when enabled
    if config.ema_decay > 0:
        avg = [p.copy() for p in params]
        monitored = Classifier(avg[0::2], avg[1::2], clf.shift, clf.scale, config)
    else:
        avg, monitored = None, clf
    best_loss, best_params, wait = np.inf, [p.copy() for p in params], 0
    bs = config.batch_size
    for epoch in range(config.epochs):
        order = train[rng.permutation(len(train))]
        epoch_loss = 0.0
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            loss, grads = _loss_and_grad(clf, h[idx], wa_t[idx], wb_t[idx], norm=len(idx))
            epoch_loss += loss * len(idx)
            opt.step(params, grads)
            if avg is not None:
                for a, p in zip(avg, params):
                    a *= config.ema_decay
                    a += (1 - config.ema_decay) * p
        v_loss, _ = _loss_and_grad(monitored, h_val, wa_val, wb_val, norm=val_norm,
                                   want_grad=False)
        clf.train_loss.append(epoch_loss / len(train))
        clf.val_loss.append(v_loss)
        if not (np.isfinite(v_loss) and np.isfinite(epoch_loss)):
            raise TrainingError(
                f"non-finite loss at epoch {epoch} (train {epoch_loss}, validation {v_loss}); "
                "check for net-negative weights")
        if v_loss < best_loss:
            best_loss, wait, clf.best_epoch = v_loss, 0, epoch
            best_params = [p.copy() for p in monitored.params]
        else:
            wait += 1
            if wait >= config.patience:
                break
    for p, b in zip(params, best_params):
        p[...] = b
    log.debug("trained %d points: %d epochs, best %d, val loss %.6g",
              len(x), len(clf.val_loss), clf.best_epoch, best_loss)
    return clf


def train(A: EventSet, B: EventSet, config: NetworkConfig) -> Classifier:
    """Classifier separating weighted sample ``A`` (label 1) from ``B`` (label 0)."""
    if len(A) == 0 or len(B) == 0:
        raise ValueError("both classes must be non-empty")
    x, wa, wb = _stack(A, B, config.input_dim)
    return train_weighted(x, wa, wb, config)
