"""Small feed-forward classifiers trained with plain numpy.

Models are rectifier MLPs with identity output (logits). Training supports
cross-entropy, KL distillation onto probit targets and negated
cross-entropy (gradient ascent), with SGD-momentum or Adam and a
multiplicative per-epoch learning-rate decay. All randomness flows from
``TrainConfig.seed`` so every run is bit-reproducible.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datagen import ForgetSplit, LabeledDataset, _atomic_write
from .numkit import log_softmax, softmax

__all__ = [
    "MlpModel",
    "make_arch",
    "ARCHS",
    "TrainConfig",
    "EpochRecord",
    "TrainTrace",
    "Monitor",
    "TrainingDivergedError",
    "loss_and_gradients",
    "numerical_gradient",
    "train_ce",
    "distill",
    "baseline",
    "BASELINES",
    "select_best_epoch",
    "save_model",
    "load_model",
    "MlpClassifier",
]

LOSSES = ("cross_entropy", "kl_to_targets", "negated_cross_entropy")
OPTIMIZERS = ("sgd-momentum", "adam")
BASELINES = ("FT", "GA", "GA+FT", "RL+FT", "Retrain")
ARCHS = ("linear", "mlp1", "mlp2")
CHECKPOINT_FORMAT = "proxyunlearn-mlp/1"


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch):
        super().__init__(f"training diverged: non-finite loss at epoch {epoch}")
        self.epoch = epoch


class MlpModel:
    """Rectifier MLP with ``layer_dims = [d, h_1, ..., C]``.

    Weights are stored as ``(fan_in, fan_out)`` matrices and initialized
    uniformly in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``.
    """

    def __init__(self, layer_dims: Sequence[int], seed: int = 0):
        dims = [int(v) for v in layer_dims]
        if len(dims) < 2 or min(dims) < 1:
            raise ValueError(f"invalid layer dims {dims}")
        self.layer_dims = dims
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def params(self) -> List[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        return out

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    @property
    def n_classes(self):
        return self.layer_dims[-1]

    def copy(self):
        new = MlpModel.__new__(MlpModel)
        new.layer_dims = list(self.layer_dims)
        new.weights = [W.copy() for W in self.weights]
        new.biases = [b.copy() for b in self.biases]
        return new

    def get_flat(self):
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError("parameter vector has the wrong size")
        pos = 0
        for p in self.params:
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size

    def _forward(self, X):
        acts = [X]
        h = X
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            h = z if i == last else np.maximum(z, 0.0)
            acts.append(h)
        return acts

    def logits(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.layer_dims[0]:
            raise ValueError(f"expected {self.layer_dims[0]} features, got {X.shape[1]}")
        return self._forward(X)[-1]

    def predict_proba(self, X):
        return softmax(self.logits(X))

    def predict(self, X):
        return np.argmax(self.logits(X), axis=1)

    def __call__(self, X):
        return self.logits(X)


def make_arch(name: str, d: int, n_classes: int, hidden: int = 64, seed: int = 0) -> MlpModel:
    """``linear`` (no hidden layer), ``mlp1`` or ``mlp2``."""
    depth = {"linear": 0, "mlp1": 1, "mlp2": 2}.get(name)
    if depth is None:
        raise ValueError(f"unknown architecture {name!r}; expected one of {ARCHS}")
    return MlpModel([d] + [hidden] * depth + [n_classes], seed=seed)


# -- losses and gradients ---------------------------------------------------


def _loss_and_dlogits(z, targets, loss):
    n = z.shape[0]
    logp = log_softmax(z)
    p = np.exp(logp)
    if loss == "kl_to_targets":
        t = targets
        pos = t > 0
        neg_ent = np.sum(np.where(pos, t * np.log(np.where(pos, t, 1.0)), 0.0))
        cross = -np.sum(np.where(pos, t * logp, 0.0))
        value = (neg_ent + cross) / n
        return value, (p - t) / n
    onehot = np.zeros_like(p)
    onehot[np.arange(n), targets] = 1.0
    value = -np.sum(logp[np.arange(n), targets]) / n
    grad = (p - onehot) / n
    if loss == "negated_cross_entropy":
        return -value, -grad
    return value, grad


def loss_and_gradients(model: MlpModel, X, targets, loss="cross_entropy"):
    """Mean loss over the batch and its gradient for every parameter.

    ``targets`` are integer labels, or probit rows for ``kl_to_targets``.
    Gradients are returned in the order of ``model.params``.
    """
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}")
    acts = model._forward(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    value, delta = _loss_and_dlogits(acts[-1], targets, loss)
    grads = [None] * (2 * len(model.weights))
    for i in range(len(model.weights) - 1, -1, -1):
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0)
    return float(value), grads


def numerical_gradient(model: MlpModel, X, targets, loss="cross_entropy", step=1e-5):
    """Central finite-difference gradient as one flat vector."""
    flat = model.get_flat()
    probe = model.copy()
    out = np.empty_like(flat)
    for j in range(flat.size):
        bumped = flat.copy()
        bumped[j] = flat[j] + step
        probe.set_flat(bumped)
        up, _ = loss_and_gradients(probe, X, targets, loss)
        bumped[j] = flat[j] - step
        probe.set_flat(bumped)
        down, _ = loss_and_gradients(probe, X, targets, loss)
        out[j] = (up - down) / (2.0 * step)
    return out


# -- configuration and traces -----------------------------------------------


@dataclass
class TrainConfig:
    """Optimization settings. ``epochs = 0`` leaves the model untouched."""

    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 1.0
    loss: str = "cross_entropy"

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ValueError("epochs must be a non-negative integer")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    seconds: float
    acc_t: Optional[float] = None
    acc_f: Optional[float] = None
    kl_t: Optional[float] = None
    kl_f: Optional[float] = None
    ce_t: Optional[float] = None
    ce_f: Optional[float] = None
    phase: str = ""


@dataclass
class TrainTrace:
    records: List[EpochRecord] = field(default_factory=list)
    initial_loss: Optional[float] = None

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def extend(self, other: "TrainTrace"):
        offset = self.records[-1].seconds if self.records else 0.0
        for r in other.records:
            self.records.append(replace(r, epoch=len(self.records), seconds=r.seconds + offset))
        if self.initial_loss is None:
            self.initial_loss = other.initial_loss

    @property
    def seconds(self):
        return self.records[-1].seconds if self.records else 0.0

    def to_json(self):
        return json.dumps([asdict(r) for r in self.records], indent=1)

    @classmethod
    def from_json(cls, text):
        return cls([EpochRecord(**r) for r in json.loads(text)])


@dataclass
class Monitor:
    """Held-out evaluation run after every epoch.

    ``test`` and ``forget`` are ``(X, y)`` pairs; ``reference`` is any model
    with ``predict_proba`` (typically the retrained network). Without a
    reference only accuracies and cross-entropy stand-ins are recorded.
    """

    test: Optional[tuple] = None
    forget: Optional[tuple] = None
    reference: Optional[object] = None

    def __post_init__(self):
        # reference probits never change; compute them once
        self._ref = {}
        if self.reference is not None:
            for name in ("test", "forget"):
                pair = getattr(self, name)
                if pair is not None:
                    self._ref[name] = self.reference.predict_proba(pair[0])

    def evaluate(self, model: MlpModel) -> dict:
        from .evaluation import mean_kl

        out = {}
        for name, suffix in (("test", "t"), ("forget", "f")):
            pair = getattr(self, name)
            if pair is None or len(pair[1]) == 0:
                continue
            X, y = pair
            logp = log_softmax(model.logits(X))
            out[f"acc_{suffix}"] = float(np.mean(np.argmax(logp, axis=1) == y))
            out[f"ce_{suffix}"] = float(-np.mean(logp[np.arange(len(y)), y]))
            if name in self._ref:
                out[f"kl_{suffix}"] = mean_kl(self._ref[name], np.exp(logp))
        return out


# -- optimizers -------------------------------------------------------------


class _Optimizer:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params] if cfg.optimizer == "adam" else None
        self.t = 0

    def step(self, params, grads, lr):
        cfg = self.cfg
        self.t += 1
        if cfg.optimizer == "sgd-momentum":
            for p, g, m in zip(params, grads, self.m):
                m *= cfg.momentum
                m += g
                p -= lr * m
            return
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def _full_loss(model, X, targets, loss):
    value, _ = loss_and_gradients(model, X, targets, loss)
    return value


def _fit(model: MlpModel, X, targets, cfg: TrainConfig, loss: str, monitor=None, phase=""):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    trace = TrainTrace(initial_loss=_full_loss(model, X, targets, loss) if n else None)
    if cfg.epochs == 0 or n == 0:
        return trace
    rng = np.random.default_rng(cfg.seed)
    opt = _Optimizer(model.params, cfg)
    start = time.perf_counter()
    lr = cfg.learning_rate
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                try:
                    value, grads = loss_and_gradients(model, X[idx], targets[idx], loss)
                except ValueError:
                    # overflowing logits are rejected by the softmax helpers
                    if np.isfinite(model.logits(X[idx])).all():
                        raise
                    raise TrainingDivergedError(epoch) from None
                if not np.isfinite(value):
                    raise TrainingDivergedError(epoch)
                total += value * idx.size
                opt.step(model.params, grads, lr)
            if not all(np.isfinite(p).all() for p in model.params):
                raise TrainingDivergedError(epoch)
        lr *= cfg.lr_decay
        metrics = monitor.evaluate(model) if monitor is not None else {}
        record = EpochRecord(epoch, total / n, time.perf_counter() - start, phase=phase, **metrics)
        if not np.isfinite(record.loss):
            raise TrainingDivergedError(epoch)
        trace.records.append(record)
    return trace


def _check_labels(y, n_classes):
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError("labels out of range for the model's output size")
    return y


def train_ce(model: MlpModel, dataset: LabeledDataset, cfg: TrainConfig, monitor: Optional[Monitor] = None,
             loss: str = "cross_entropy") -> TrainTrace:
    """Train ``model`` in place by (possibly negated) cross-entropy."""
    if loss not in ("cross_entropy", "negated_cross_entropy"):
        raise ValueError("train_ce takes a label loss")
    y = _check_labels(dataset.labels, model.n_classes)
    return _fit(model, dataset.features, y, cfg, loss, monitor)


def distill(student: MlpModel, teacher_probits, dataset: LabeledDataset, cfg: TrainConfig,
            monitor: Optional[Monitor] = None) -> TrainTrace:
    """Fine-tune ``student`` in place to minimize mean KL(teacher || student).

    Teacher rows may contain exact zeros. The student starts from its
    current parameters.
    """
    t = np.atleast_2d(np.asarray(teacher_probits, dtype=np.float64))
    if t.shape != (len(dataset), student.n_classes):
        raise ValueError("teacher probits must have one row per sample and one column per class")
    if np.any(t < 0) or not np.allclose(t.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("teacher probits must be probability vectors")
    return _fit(student, dataset.features, t, cfg, "kl_to_targets", monitor)


def baseline(kind: str, initial: MlpModel, dataset: LabeledDataset, split: ForgetSplit, cfg: TrainConfig,
             monitor: Optional[Monitor] = None, ga_lr_scale: float = 0.1, ga_epoch_cap: int = 5):
    """Run a reference unlearning method; returns ``(model, trace)``.

    FT fine-tunes on the retain set. GA ascends the forget-set loss at
    ``ga_lr_scale`` times the rate for at most ``ga_epoch_cap`` epochs.
    GA+FT runs one ascent epoch then FT. RL+FT relabels every forget sample
    to a different class drawn uniformly and fine-tunes on everything.
    Retrain trains a fresh model of the same shape on the retain set.
    """
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    forget = split.forget_mask(dataset)
    Xr, yr = dataset.features[~forget], dataset.labels[~forget]
    Xf, yf = dataset.features[forget], dataset.labels[forget]
    C = initial.n_classes
    ga_cfg = replace(cfg, learning_rate=cfg.learning_rate * ga_lr_scale)

    if kind == "Retrain":
        model = MlpModel(initial.layer_dims, seed=cfg.seed)
        return model, _fit(model, Xr, yr, cfg, "cross_entropy", monitor, "retrain")
    model = initial.copy()
    if kind == "FT":
        return model, _fit(model, Xr, yr, cfg, "cross_entropy", monitor, "ft")
    if kind == "GA":
        ga_cfg = replace(ga_cfg, epochs=min(cfg.epochs, ga_epoch_cap))
        return model, _fit(model, Xf, yf, ga_cfg, "negated_cross_entropy", monitor, "ga")
    if kind == "GA+FT":
        trace = _fit(model, Xf, yf, replace(ga_cfg, epochs=min(1, cfg.epochs)), "negated_cross_entropy",
                     monitor, "ga")
        trace.extend(_fit(model, Xr, yr, cfg, "cross_entropy", monitor, "ft"))
        return model, trace
    # RL+FT
    rng = np.random.default_rng([cfg.seed, 1])
    relabeled = (yf + rng.integers(1, C, size=yf.size)) % C if C > 1 else yf
    X = np.concatenate([Xr, Xf])
    y = np.concatenate([yr, relabeled])
    return model, _fit(model, X, y, cfg, "cross_entropy", monitor, "rl+ft")


def select_best_epoch(trace: TrainTrace) -> int:
    """Epoch with the smallest forget-set KL; ties go to the earliest."""
    values = trace.column("kl_f")
    if not values or any(v is None for v in values):
        raise ValueError("trace has no forget-set KL; supply a reference model when training")
    return int(np.argmin(np.asarray(values, dtype=np.float64)))


# -- persistence ------------------------------------------------------------


def model_to_text(model: MlpModel) -> str:
    lines = [CHECKPOINT_FORMAT, "dims " + " ".join(str(d) for d in model.layer_dims)]
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        lines.append(f"W{i} " + " ".join(repr(float(v)) for v in W.ravel()))
        lines.append(f"b{i} " + " ".join(repr(float(v)) for v in b))
    return "\n".join(lines) + "\n"


def model_from_text(text: str) -> MlpModel:
    lines = text.strip().splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_FORMAT:
        raise ValueError("not a model checkpoint (bad header)")
    tag, *dims = lines[1].split()
    if tag != "dims":
        raise ValueError("checkpoint is missing its dims line")
    model = MlpModel([int(d) for d in dims])
    body = lines[2:]
    if len(body) != 2 * len(model.weights):
        raise ValueError("checkpoint layer count does not match dims")
    for i in range(len(model.weights)):
        for arr, line, name in ((model.weights[i], body[2 * i], f"W{i}"), (model.biases[i], body[2 * i + 1], f"b{i}")):
            tag, *vals = line.split()
            if tag != name or len(vals) != arr.size:
                raise ValueError(f"malformed checkpoint entry {name}")
            arr[...] = np.array([float(v) for v in vals]).reshape(arr.shape)
    return model


def save_model(model: MlpModel, path):
    _atomic_write(path, model_to_text(model))


def load_model(path) -> MlpModel:
    with open(path) as fh:
        return model_from_text(fh.read())


# -- estimator wrapper ------------------------------------------------------


class MlpClassifier(ClassifierMixin, BaseEstimator):
    """Scikit-learn style front end to :class:`MlpModel` and cross-entropy training."""

    def __init__(self, hidden_layer_sizes=(64,), learning_rate=1e-3, epochs=20, batch_size=64,
                 optimizer="adam", lr_decay=1.0, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr_decay = lr_decay
        self.random_state = random_state

    def _config(self):
        return TrainConfig(
            learning_rate=self.learning_rate, epochs=self.epochs, batch_size=self.batch_size,
            seed=self.random_state, optimizer=self.optimizer, lr_decay=self.lr_decay,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        dims = [X.shape[1], *self.hidden_layer_sizes, len(self.classes_)]
        self.model_ = MlpModel(dims, seed=self.random_state)
        self.trace_ = _fit(self.model_, X, y_idx, self._config(), "cross_entropy")
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.logits(check_array(X))

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
