"""Fully connected feedforward network with plain gradient-descent training.

Everything is hand-rolled on numpy: forward pass, reverse-mode gradients,
and the weight update w <- w - alpha * dP/dw.  Networks are immutable
values; every operation returns a new one.  No framework, no momentum, no
adaptive rates.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fileio import atomic_write_text


class NotDifferentiableError(ValueError):
    """Gradient requested for an activation with no usable derivative."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, epoch):
        super().__init__(f"training diverged at epoch {epoch}")
        self.epoch = epoch


class ActivationKind(enum.Enum):
    SIGMOID = "Sigmoid"
    TANH = "TanH"
    BINARY_STEP = "Binary step"
    RELU = "ReLU"
    IDENTITY = "identity"


def activate(kind: ActivationKind, x):
    """Apply the activation elementwise (scalars or arrays)."""
    x = np.asarray(x, dtype=float)
    if kind is ActivationKind.SIGMOID:
        # split by sign to keep exp() from overflowing
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out if out.ndim else float(out)
    if kind is ActivationKind.TANH:
        return np.tanh(x) if x.ndim else float(np.tanh(x))
    if kind is ActivationKind.BINARY_STEP:
        out = np.where(x >= 0.0, 1.0, 0.0)
        return out if out.ndim else float(out)
    if kind is ActivationKind.RELU:
        out = np.where(x > 0.0, x, 0.0)
        return out if out.ndim else float(out)
    if kind is ActivationKind.IDENTITY:
        return x if x.ndim else float(x)
    raise ValueError(f"unknown activation {kind!r}")


def activate_grad(kind: ActivationKind, x):
    """Exact elementwise derivative of activate."""
    if kind is ActivationKind.BINARY_STEP:
        raise NotDifferentiableError("Binary step has zero gradient almost everywhere")
    x = np.asarray(x, dtype=float)
    if kind is ActivationKind.SIGMOID:
        s = activate(ActivationKind.SIGMOID, x)
        out = np.asarray(s) * (1.0 - np.asarray(s))
        return out if np.ndim(out) else float(out)
    if kind is ActivationKind.TANH:
        out = 1.0 - np.tanh(x) ** 2
        return out if out.ndim else float(out)
    if kind is ActivationKind.RELU:
        out = np.where(x > 0.0, 1.0, 0.0)
        return out if out.ndim else float(out)
    if kind is ActivationKind.IDENTITY:
        out = np.ones_like(x)
        return out if out.ndim else float(out)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass(frozen=True)
class Layer:
    """One dense layer: out = Act(W x + b), weights shaped (out_dim, in_dim)."""

    weights: np.ndarray
    biases: np.ndarray
    activation: ActivationKind

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        b = np.asarray(self.biases, dtype=float)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise ValueError(f"inconsistent layer shapes {w.shape} / {b.shape}")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValueError("layer parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]


@dataclass(frozen=True)
class Network:
    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("Network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(
                    f"layer dimensions do not chain: {a.out_dim} -> {b.in_dim}")
        object.__setattr__(self, "layers", layers)

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def parameter_count(self):
        return sum(l.weights.size + l.biases.size for l in self.layers)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def to_dict(self) -> dict:
        return {"learning_rate": self.learning_rate, "epochs": self.epochs,
                "batch_size": self.batch_size, "seed": self.seed}


@dataclass(frozen=True)
class Gradients:
    """dLoss/dW and dLoss/db, one entry per layer, shapes matching Network."""

    weights: tuple
    biases: tuple


def init_network(dims: Sequence[int], activations: Sequence[ActivationKind],
                 seed: int = 0) -> Network:
    """Fresh network with uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    rng = np.random.default_rng(seed)
    layers = []
    for n_in, n_out, act in zip(dims, dims[1:], activations):
        bound = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-bound, bound, size=(n_out, n_in))
        layers.append(Layer(w, np.zeros(n_out), act))
    return Network(tuple(layers))


def _check_input(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2) or x.shape[-1] != net.in_dim:
        raise ValueError(
            f"input shape {x.shape} does not match network input dim {net.in_dim}")
    return x


def forward(net: Network, x) -> np.ndarray:
    """Layer-by-layer Act(W x + b); accepts a vector or an (n, in_dim) batch."""
    x = _check_input(net, x)
    a = x
    for layer in net.layers:
        z = a @ layer.weights.T + layer.biases
        a = activate(layer.activation, z)
        a = np.asarray(a)
    return a


def _forward_cached(net: Network, x2d: np.ndarray):
    """Batch forward keeping pre-activations and activations for backprop."""
    acts = [x2d]
    preacts = []
    a = x2d
    for layer in net.layers:
        z = a @ layer.weights.T + layer.biases
        a = np.asarray(activate(layer.activation, z))
        preacts.append(z)
        acts.append(a)
    return acts, preacts


def _batch_backward(net: Network, x2d: np.ndarray, t2d: np.ndarray):
    """Mean gradients and mean per-sample loss over a batch.

    Loss per sample is 0.5 * ||y - t||^2; gradients follow from the exact
    reverse-mode chain rule through every layer.
    """
    for layer in net.layers:
        if layer.activation is ActivationKind.BINARY_STEP:
            raise NotDifferentiableError("cannot backpropagate through Binary step")
    acts, preacts = _forward_cached(net, x2d)
    y = acts[-1]
    n = x2d.shape[0]
    resid = y - t2d
    loss = 0.5 * float(np.sum(resid * resid)) / n

    grads_w = [None] * len(net.layers)
    grads_b = [None] * len(net.layers)
    delta = resid  # dLoss/dy for the summed loss, divided by n at the end
    for li in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[li]
        delta = delta * np.asarray(activate_grad(layer.activation, preacts[li]))
        grads_w[li] = delta.T @ acts[li] / n
        grads_b[li] = delta.sum(axis=0) / n
        if li > 0:
            delta = delta @ layer.weights
    return Gradients(tuple(grads_w), tuple(grads_b)), loss


def backward(net: Network, x, target):
    """Gradients of 0.5*||forward(net, x) - target||^2 for one sample."""
    x = _check_input(net, x)
    t = np.asarray(target, dtype=float)
    if x.ndim != 1:
        raise ValueError("backward takes a single sample; use train for batches")
    if t.shape != (net.out_dim,):
        raise ValueError(
            f"target shape {t.shape} does not match network output dim {net.out_dim}")
    return _batch_backward(net, x[None, :], t[None, :])


def sgd_update(net: Network, grads: Gradients, learning_rate: float) -> Network:
    """w(k+1) = w(k) - alpha * dP/dw, likewise for biases; nothing else moves."""
    if len(grads.weights) != len(net.layers):
        raise ValueError("gradient/network layer count mismatch")
    layers = []
    for layer, gw, gb in zip(net.layers, grads.weights, grads.biases):
        if gw.shape != layer.weights.shape or gb.shape != layer.biases.shape:
            raise ValueError("gradient shape does not match layer shape")
        layers.append(Layer(layer.weights - learning_rate * gw,
                            layer.biases - learning_rate * gb,
                            layer.activation))
    return Network(tuple(layers))


def train(net: Network, inputs, targets, cfg: TrainConfig):
    """Mini-batch gradient descent with a seeded shuffle each epoch.

    Returns (trained network, per-epoch mean loss).  The epoch loss is the
    mean per-sample loss as each batch is visited (before its update), so a
    fixed seed reproduces the history bit for bit.
    """
    x = np.asarray(inputs, dtype=float)
    t = np.asarray(targets, dtype=float)
    if x.ndim != 2 or t.ndim != 2:
        raise ValueError("inputs and targets must be 2-D (n_samples, dim)")
    if x.shape[0] != t.shape[0]:
        raise ValueError("inputs and targets must have the same number of rows")
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    if x.shape[1] != net.in_dim or t.shape[1] != net.out_dim:
        raise ValueError("dataset dims do not match network dims")

    rng = np.random.default_rng(cfg.seed)
    n = x.shape[0]
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            grads, batch_loss = _batch_backward(net, x[idx], t[idx])
            if not np.isfinite(batch_loss):
                raise DivergenceError(epoch)
            total += batch_loss * len(idx)
            try:
                net = sgd_update(net, grads, cfg.learning_rate)
            except ValueError as exc:  # update overflowed to inf/nan
                raise DivergenceError(epoch) from exc
        epoch_loss = total / n
        history.append(epoch_loss)
    return net, history


def input_jacobian(net: Network, x) -> np.ndarray:
    """d output / d input at x, shape (out_dim, in_dim).

    Product of the per-layer Jacobians diag(Act'(z)) W evaluated on the
    forward pass; used by the predictive controller to differentiate
    rollouts.
    """
    x = _check_input(net, x)
    if x.ndim != 1:
        raise ValueError("input_jacobian takes a single sample")
    a = x
    jac = np.eye(net.in_dim)
    for layer in net.layers:
        z = layer.weights @ a + layer.biases
        g = np.asarray(activate_grad(layer.activation, z))
        jac = (layer.weights * g[:, None]) @ jac
        a = np.asarray(activate(layer.activation, z))
    return jac


# --- persistence -----------------------------------------------------------

def network_to_dict(net: Network) -> dict:
    return {
        "layers": [
            {
                "in_dim": l.in_dim,
                "out_dim": l.out_dim,
                "activation": l.activation.value,
                "weights": [float(v) for v in l.weights.ravel()],  # row-major
                "biases": [float(v) for v in l.biases],
            }
            for l in net.layers
        ]
    }


def network_from_dict(d: dict) -> Network:
    layers = []
    for spec in d["layers"]:
        w = np.array(spec["weights"], dtype=float).reshape(spec["out_dim"], spec["in_dim"])
        b = np.array(spec["biases"], dtype=float)
        layers.append(Layer(w, b, ActivationKind(spec["activation"])))
    return Network(tuple(layers))


def save_network(net: Network, path):
    atomic_write_text(path, json.dumps(network_to_dict(net), indent=1) + "\n")


def load_network(path) -> Network:
    with open(path) as f:
        return network_from_dict(json.load(f))
