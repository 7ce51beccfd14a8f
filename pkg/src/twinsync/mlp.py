"""Fully connected ReLU network trained with mini-batch SGD on MSE.

Weights are stored input-major (``W`` has shape ``fan_in x fan_out``) and a
batch ``X`` of shape ``B x fan_in`` flows forward as ``X @ W + b``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, DivergenceDetected, InvalidConfig, NonFiniteInput


@dataclass(frozen=True)
class MlpConfig:
    hidden_widths: tuple = (64, 64)
    epochs: int = 1000
    batch_size: int = 32
    validation_fraction: float = 0.2
    learning_rate: float = 1e-3
    momentum: float = 0.0
    seed: int = 0
    n_inputs: int = 6
    n_outputs: int = 2
    # "epochs": one unit = a full pass; "steps": one unit = one mini-batch
    iteration_unit: str = "epochs"
    early_stopping_patience: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if any(w < 1 for w in self.hidden_widths):
            raise InvalidConfig(f"hidden widths must be positive: {self.hidden_widths}")
        if self.epochs < 1:
            raise InvalidConfig(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise InvalidConfig(
                f"validation_fraction must lie in [0, 1), got {self.validation_fraction}")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise InvalidConfig(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidConfig(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.iteration_unit not in ("epochs", "steps"):
            raise InvalidConfig(f"unknown iteration unit {self.iteration_unit!r}")
        if self.early_stopping_patience is not None and self.early_stopping_patience < 1:
            raise InvalidConfig("early_stopping_patience must be >= 1")

    @property
    def layer_sizes(self) -> tuple:
        return (self.n_inputs, *self.hidden_widths, self.n_outputs)


@dataclass(eq=False)
class MlpModel:
    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionMismatch("weights and biases must be non-empty and paired")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise DimensionMismatch(f"layer {k}: W {W.shape} and b {b.shape} disagree")
            if k and W.shape[0] != self.weights[k - 1].shape[1]:
                raise DimensionMismatch(f"layer {k} input does not chain from layer {k - 1}")

    @property
    def shapes(self) -> list:
        return [W.shape for W in self.weights]

    def copy(self) -> "MlpModel":
        return MlpModel([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def to_dict(self) -> dict:
        return {
            "type": "mlp",
            "layers": [
                {"w": [[float(v) for v in row] for row in W], "b": [float(v) for v in b]}
                for W, b in zip(self.weights, self.biases)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        if d.get("type") != "mlp":
            raise ValueError(f"not an mlp model document: type={d.get('type')!r}")
        weights = [np.asarray(layer["w"], dtype=float) for layer in d["layers"]]
        biases = [np.asarray(layer["b"], dtype=float) for layer in d["layers"]]
        return cls(weights, biases)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "MlpModel":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MlpModel":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def predict(self, X) -> np.ndarray:
        return forward(self, X)


@dataclass
class TrainingHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    initial_train_loss: float = math.nan

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for k, tl in enumerate(self.train_loss):
                vl = self.val_loss[k] if k < len(self.val_loss) else math.nan
                w.writerow([k + 1, repr(float(tl)), "" if math.isnan(vl) else repr(float(vl))])


def init_mlp(config: MlpConfig) -> MlpModel:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(config.seed)
    sizes = config.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases)


def _as_batch(model: MlpModel, X) -> tuple:
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.weights[0].shape[0]:
        raise DimensionMismatch(
            f"expected inputs with {model.weights[0].shape[0]} columns, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise NonFiniteInput("input contains NaN or infinity")
    return X, single


def _forward_cached(model: MlpModel, X: np.ndarray) -> tuple:
    """Return ``(output, activations, preactivations)`` for backprop."""
    acts = [X]
    pres = []
    h = X
    last = len(model.weights) - 1
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W + b
        pres.append(z)
        h = z if k == last else np.maximum(z, 0.0)
        acts.append(h)
    return h, acts, pres


def forward(model: MlpModel, X) -> np.ndarray:
    X, single = _as_batch(model, X)
    out = _forward_cached(model, X)[0]
    return out[0] if single else out


predict_mlp = forward


def loss_and_gradients(model: MlpModel, batch_x, batch_y) -> tuple:
    """Mean squared error over every output cell and its exact gradients.

    Returns ``(loss, grads)`` where ``grads`` is a list of ``(dW, db)`` per layer.
    """
    X, _ = _as_batch(model, batch_x)
    Y = np.asarray(batch_y, dtype=float)
    if Y.ndim == 1:
        Y = Y[None, :]
    n_out = model.weights[-1].shape[1]
    if Y.shape != (X.shape[0], n_out):
        raise DimensionMismatch(f"targets {Y.shape} do not match batch ({X.shape[0]}, {n_out})")
    out, acts, pres = _forward_cached(model, X)
    diff = out - Y
    loss = float(np.mean(diff * diff))
    delta = 2.0 * diff / diff.size
    grads = [None] * len(model.weights)
    for k in range(len(model.weights) - 1, -1, -1):
        grads[k] = (acts[k].T @ delta, delta.sum(axis=0))
        if k:
            delta = (delta @ model.weights[k].T) * (pres[k - 1] > 0)
    return loss, grads


def _mse(model, X, Y) -> float:
    d = _forward_cached(model, X)[0] - Y
    return float(np.mean(d * d))


def train_mlp(X, Y, config: MlpConfig, model: MlpModel | None = None) -> tuple:
    """Shuffled mini-batch SGD (optionally with momentum).

    A ``validation_fraction`` share of the rows is held out for monitoring only.
    Returns ``(model, history)``; losses are full-set MSE after every epoch.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise DimensionMismatch(f"X {X.shape} and Y {Y.shape} are not aligned")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise NonFiniteInput("training data contains NaN or infinity")
    if model is None:
        model = init_mlp(config)
    else:
        model = model.copy()
    rng = np.random.default_rng(config.seed + 1)
    n = X.shape[0]
    n_val = int(math.floor(config.validation_fraction * n))
    if n_val >= n:
        n_val = n - 1
    order = rng.permutation(n)
    val_idx, tr_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    Xtr, Ytr = X[tr_idx], Y[tr_idx]
    Xva, Yva = X[val_idx], Y[val_idx]

    history = TrainingHistory(initial_train_loss=_mse(model, Xtr, Ytr))
    velocity = [(np.zeros_like(W), np.zeros_like(b)) for W, b in zip(model.weights, model.biases)]
    lr, mu, bs = config.learning_rate, config.momentum, config.batch_size
    n_tr = Xtr.shape[0]
    steps_left = config.epochs if config.iteration_unit == "steps" else None
    n_epochs = config.epochs if steps_left is None else math.ceil(config.epochs / math.ceil(n_tr / bs))
    best_val, stale = math.inf, 0

    for _ in range(n_epochs):
        perm = rng.permutation(n_tr)
        for s in range(0, n_tr, bs):
            if steps_left is not None:
                if steps_left == 0:
                    break
                steps_left -= 1
            idx = perm[s:s + bs]
            _, grads = loss_and_gradients(model, Xtr[idx], Ytr[idx])
            for k, (dW, db) in enumerate(grads):
                vW, vb = velocity[k]
                vW *= mu
                vW -= lr * dW
                vb *= mu
                vb -= lr * db
                model.weights[k] += vW
                model.biases[k] += vb
        tl = _mse(model, Xtr, Ytr)
        vl = _mse(model, Xva, Yva) if n_val else math.nan
        history.train_loss.append(tl)
        history.val_loss.append(vl)
        if not math.isfinite(tl):
            raise DivergenceDetected(
                f"training loss became non-finite at epoch {len(history.train_loss)}",
                model=model, history=history)
        if config.early_stopping_patience is not None and n_val:
            if vl < best_val:
                best_val, stale = vl, 0
            else:
                stale += 1
                if stale >= config.early_stopping_patience:
                    break
    return model, history
