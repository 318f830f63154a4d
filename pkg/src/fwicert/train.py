"""Losses, first-order optimizers and the minibatch fitting loop."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .linop import ShapeError
from .network import NetworkParams, NetworkSpec, backward, forward, predict

log = logging.getLogger(__name__)

LOSS_KINDS = ("mae", "mse")
OPTIMIZERS = ("sgd", "adagrad", "adamw")
DEFAULT_LR = {"sgd": 1e-2, "adagrad": 1e-2, "adamw": 1e-3}
DIVERGENCE_LIMIT = 1e6


def _residual(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return pred - target


def compute_loss(pred, target, kind="mae") -> float:
    """Mean absolute or mean squared error over all elements."""
    r = _residual(pred, target)
    if kind == "mae":
        return float(np.mean(np.abs(r)))
    if kind == "mse":
        return float(np.mean(r * r))
    raise ValueError(f"unknown loss kind {kind!r}")


def per_sample_loss(pred, target, kind="mae") -> np.ndarray:
    """Loss of each item along the leading axis."""
    r = _residual(pred, target).reshape(len(pred), -1)
    if kind == "mae":
        return np.mean(np.abs(r), axis=1)
    if kind == "mse":
        return np.mean(r * r, axis=1)
    raise ValueError(f"unknown loss kind {kind!r}")


def loss_gradient(pred, target, kind="mae") -> np.ndarray:
    """Derivative of :func:`compute_loss` with respect to ``pred``; sign(0) = 0 for MAE."""
    r = _residual(pred, target)
    if kind == "mae":
        return np.sign(r) / r.size
    if kind == "mse":
        return 2.0 * r / r.size
    raise ValueError(f"unknown loss kind {kind!r}")


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    slots: dict = field(default_factory=dict)


def make_optimizer(kind, params: NetworkParams, learning_rate=None, weight_decay=None):
    if kind not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {kind!r}")
    lr = DEFAULT_LR[kind] if learning_rate is None else float(learning_rate)
    if weight_decay is None:
        weight_decay = 1e-4 if kind == "adamw" else 0.0
    state = OptimizerState(kind, lr, weight_decay)
    zeros = [np.zeros_like(w) for w in params.weights] + [np.zeros_like(b) for b in params.biases]
    if kind == "adagrad":
        state.slots["sum_sq"] = zeros
    elif kind == "adamw":
        state.slots["m"] = zeros
        state.slots["v"] = [z.copy() for z in zeros]
    return state


def optimizer_step(params: NetworkParams, grads: NetworkParams, state: OptimizerState,
                   trainable_bias=None):
    """Apply one update; returns ``(new_params, state)`` without touching the inputs.

    ``trainable_bias`` is a per-layer flag list; biases flagged False (the
    convolutional ones) are carried over unchanged.
    """
    depth = len(params.weights)
    if trainable_bias is None:
        trainable_bias = [True] * depth
    tensors = params.weights + params.biases
    gtensors = grads.weights + grads.biases
    for i, g in enumerate(gtensors):
        if g.shape != tensors[i].shape:
            raise ShapeError(f"gradient {i} has shape {g.shape}, parameter has {tensors[i].shape}")
        if not np.all(np.isfinite(g)):
            layer, what = i % depth, ("weight" if i < depth else "bias")
            raise FloatingPointError(f"non-finite {what} gradient in layer {layer}")
    state.step += 1
    t = state.step
    out = []
    for i, (p, g) in enumerate(zip(tensors, gtensors)):
        if i >= depth and not trainable_bias[i - depth]:
            out.append(p)
            continue
        if state.kind == "sgd":
            new = p - state.learning_rate * g
        elif state.kind == "adagrad":
            acc = state.slots["sum_sq"][i] + g * g
            state.slots["sum_sq"][i] = acc
            new = p - state.learning_rate * g / (np.sqrt(acc) + state.epsilon)
        else:
            m = state.beta1 * state.slots["m"][i] + (1 - state.beta1) * g
            v = state.beta2 * state.slots["v"][i] + (1 - state.beta2) * g * g
            state.slots["m"][i], state.slots["v"][i] = m, v
            m_hat = m / (1 - state.beta1 ** t)
            v_hat = v / (1 - state.beta2 ** t)
            new = p * (1 - state.learning_rate * state.weight_decay)
            new = new - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        out.append(new)
    return NetworkParams(out[:depth], out[depth:]), state


@dataclass
class TrainRecord:
    train_loss: list = field(default_factory=list)
    heldout_loss: list = field(default_factory=list)
    max_train_loss: float = float("nan")
    initial_train_loss: float = float("nan")
    wall_time: list = field(default_factory=list)
    diverged: bool = False

    def same_numbers(self, other) -> bool:
        """Equality ignoring wall-clock time."""
        return (self.train_loss == other.train_loss
                and self.heldout_loss == other.heldout_loss
                and self.max_train_loss == other.max_train_loss
                and self.initial_train_loss == other.initial_train_loss
                and self.diverged == other.diverged)


def fit(spec: NetworkSpec, params: NetworkParams, dataset, loss_kind="mae",
        optimizer="adamw", epochs=10, batch_size=32, seed=0, heldout=None,
        learning_rate=None, weight_decay=None):
    """Minibatch training.

    ``dataset`` and ``heldout`` are ``(inputs, targets)`` pairs with a leading
    sample axis. Shuffling uses its own generator seeded with ``seed`` so it
    is independent of how the weights were initialised. Returns the trained
    parameters and a :class:`TrainRecord`; training stops early (with
    ``diverged`` set) once the training loss exceeds 1e6 or turns non-finite.
    """
    x, y = (np.asarray(a, dtype=np.float64) for a in dataset)
    if len(x) == 0:
        raise ValueError("cannot fit on an empty dataset")
    if len(x) != len(y):
        raise ShapeError(f"{len(x)} inputs but {len(y)} targets")
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    state = optimizer if isinstance(optimizer, OptimizerState) else make_optimizer(
        optimizer, params, learning_rate, weight_decay)
    trainable_bias = [layer.kind == "dense" for layer in spec.layers]
    rng = np.random.default_rng(seed)
    record = TrainRecord()
    record.initial_train_loss = compute_loss(predict(params, spec, x), y, loss_kind)
    start = time.perf_counter()
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        for lo in range(0, len(x), batch_size):
            idx = np.sort(order[lo:lo + batch_size])
            pred, cache = forward(params, spec, x[idx])
            grad = loss_gradient(pred, y[idx], loss_kind)
            grads, _ = backward(params, spec, cache, grad)
            try:
                params, state = optimizer_step(params, grads, state, trainable_bias)
            except FloatingPointError:
                record.diverged = True
                break
        loss = compute_loss(predict(params, spec, x), y, loss_kind)
        record.train_loss.append(loss)
        if heldout is not None:
            record.heldout_loss.append(
                compute_loss(predict(params, spec, heldout[0]), heldout[1], loss_kind))
        record.wall_time.append(time.perf_counter() - start)
        if record.diverged or not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            record.diverged = True
            log.warning("training diverged at epoch %d (loss %g)", epoch, loss)
            break
    losses = per_sample_loss(predict(params, spec, x), y, loss_kind)
    record.max_train_loss = float(np.max(losses))
    return params, record
