"""Plain SGD on dense stacks, plus the synthetic datasets the experiments use.

This exists to train the small models the pruning comparisons need, nothing
more: softmax cross-entropy, mini-batches, a fixed learning rate. Only chains
of dense and activation layers are supported.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .datasets import Dataset
from .errors import ConfigError, DataError, ShapeError
from .model import Layer, Network, validate


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_size: int
    seed: int


@dataclass
class LearningCurve:
    """Per-epoch mean training loss and accuracy on the training data."""

    train_loss: list
    eval_accuracy: list

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,eval_accuracy"]
        for i, (loss, acc) in enumerate(zip(self.train_loss, self.eval_accuracy)):
            lines.append("%d,%s,%s" % (i, repr(float(loss)), repr(float(acc))))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int
    dim: int
    samples_per_class: int
    cluster_spread: float
    seed: int
    center_scale: float = 3.0


def synth_dataset(spec: SynthSpec) -> Dataset:
    """Gaussian blobs around scaled one-hot centers, one blob per class.

    Class c sits at center_scale * e_c, so centers are pairwise equidistant;
    cluster_spread is the per-coordinate standard deviation. Rows come out
    shuffled (deterministically, from the spec's seed).
    """
    if spec.n_classes < 1 or spec.samples_per_class < 1:
        raise ConfigError("need at least one class and one sample per class")
    if spec.dim < spec.n_classes:
        raise ConfigError(
            "need dim >= n_classes to place one-hot centers, got dim=%d classes=%d"
            % (spec.dim, spec.n_classes)
        )
    if spec.cluster_spread < 0:
        raise ConfigError("cluster_spread must be non-negative")
    rng = np.random.default_rng(spec.seed)
    rows = []
    labels = []
    for c in range(spec.n_classes):
        center = np.zeros(spec.dim)
        center[c] = spec.center_scale
        rows.append(center + spec.cluster_spread * rng.standard_normal((spec.samples_per_class, spec.dim)))
        labels.append(np.full(spec.samples_per_class, c, dtype=int))
    inputs = np.concatenate(rows, axis=0)
    labels = np.concatenate(labels)
    order = rng.permutation(inputs.shape[0])
    return Dataset(inputs=inputs[order], labels=labels[order])


def _init_weights(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim))


def make_mlp(dims, seed: int, hidden_activation: str = "ReLU", out_activation: str = "Identity") -> Network:
    """Dense stack with the given widths; the last hidden response is the FRL."""
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ConfigError("need an input width and at least one layer width")
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(len(dims) - 1):
        last = i == len(dims) - 2
        layers.append(
            Layer(
                kind="Dense",
                weights=_init_weights(rng, dims[i + 1], dims[i]),
                bias=np.zeros(dims[i + 1]),
                activation=out_activation if last else hidden_activation,
            )
        )
    return Network(layers=tuple(layers), frl_index=max(len(layers) - 2, 0))


def reinit(net: Network, seed: int) -> Network:
    """Same architecture, fresh dense weights, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for layer in net.layers:
        if layer.kind == "Dense":
            out_dim, in_dim = layer.weights.shape
            layers.append(replace(layer, weights=_init_weights(rng, out_dim, in_dim), bias=np.zeros(out_dim)))
        else:
            layers.append(layer)
    return Network(layers=tuple(layers), frl_index=net.frl_index, skip_edges=net.skip_edges)


_GRAD_ACTS = ("Identity", "ReLU", "Sigmoid", "Tanh")


def check_trainable(net: Network):
    if net.skip_edges:
        raise ConfigError("training supports chains only, drop the skip edges")
    for i, layer in enumerate(net.layers):
        if layer.kind not in ("Dense", "Activation"):
            raise ConfigError("layer %d: only dense stacks are trainable, found %s" % (i, layer.kind))
        if layer.activation not in _GRAD_ACTS:
            raise ConfigError("layer %d: no gradient rule for activation %r" % (i, layer.activation))
    report = validate(net)
    if not report.ok:
        raise ShapeError("network fails validation: " + "; ".join("layer %d: %s" % v for v in report.violations))


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "Identity":
        return z
    if kind == "ReLU":
        return np.maximum(z, 0.0)
    if kind == "Sigmoid":
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    return np.tanh(z)


def _act_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "Identity":
        return np.ones_like(z)
    if kind == "ReLU":
        return (z > 0).astype(z.dtype)
    if kind == "Sigmoid":
        return a * (1.0 - a)
    return 1.0 - a * a


def _forward_ops(params, ops, x):
    """Returns the output plus the (input, pre-activation, activation) records."""
    a = x
    records = []
    for kind, idx, act in ops:
        if kind == "dense":
            w, b = params[idx]
            z = a @ w.T + b
        else:
            z = a
        a_new = _act(act, z)
        records.append((a, z, a_new))
        a = a_new
    return a, records


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _net_ops(net: Network):
    ops = []
    dense_ids = []
    for i, layer in enumerate(net.layers):
        if layer.kind == "Dense":
            ops.append(("dense", len(dense_ids), layer.activation))
            dense_ids.append(i)
        else:
            ops.append(("act", None, layer.activation))
    return ops, dense_ids


def loss_and_grads(net: Network, inputs: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and gradients for every dense layer.

    Returns (loss, grads) with grads[layer_id] = (dW, db). Softmax applies to
    the network's final response, after whatever activation it carries.
    """
    check_trainable(net)
    ops, dense_ids = _net_ops(net)
    params = [(net.layers[i].weights, net.layers[i].bias) for i in dense_ids]
    return _loss_and_grads_raw(params, ops, dense_ids, np.asarray(inputs, dtype=float), np.asarray(labels))


def _loss_and_grads_raw(params, ops, dense_ids, x, y):
    logits, records = _forward_ops(params, ops, x)
    m = x.shape[0]
    probs = _softmax(logits)
    loss = float(-np.log(np.maximum(probs[np.arange(m), y], 1e-300)).mean())

    d_a = probs.copy()
    d_a[np.arange(m), y] -= 1.0
    d_a /= m

    grads = {}
    for op, (a_in, z, a_out) in zip(reversed(ops), reversed(records)):
        kind, idx, act = op
        d_z = d_a * _act_grad(act, z, a_out)
        if kind == "dense":
            w, _ = params[idx]
            grads[dense_ids[idx]] = (d_z.T @ a_in, d_z.sum(axis=0))
            d_a = d_z @ w
        else:
            d_a = d_z
    return loss, grads


def train(net: Network, data: Dataset, cfg: TrainConfig):
    """Mini-batch SGD; returns (trained_net, LearningCurve).

    The epoch loss is the sample-weighted mean of batch losses, measured on
    the evolving weights; accuracy is measured on the training data after the
    epoch finishes. Zero epochs returns the network unchanged with an empty
    curve; a zero learning rate leaves the weights where they started.
    """
    if data.labels is None:
        raise DataError("training needs labeled data")
    if cfg.epochs < 0:
        raise ConfigError("epochs must be non-negative")
    if cfg.batch_size < 1:
        raise ConfigError("batch_size must be at least 1")
    if cfg.learning_rate < 0:
        raise ConfigError("learning_rate must be non-negative")
    check_trainable(net)

    x = np.asarray(data.inputs, dtype=float)
    y = np.asarray(data.labels)
    if x.ndim != 2:
        raise DataError("dense training needs flat inputs")
    n = x.shape[0]
    if n == 0:
        raise DataError("training set is empty")
    out_dim = net.layers[-1].weights.shape[0]
    if y.min() < 0 or y.max() >= out_dim:
        raise DataError("labels must lie in [0, %d)" % out_dim)

    ops, dense_ids = _net_ops(net)
    params = [
        (net.layers[i].weights.astype(float).copy(), net.layers[i].bias.astype(float).copy())
        for i in dense_ids
    ]

    rng = np.random.default_rng(cfg.seed)
    losses = []
    accs = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            loss, grads = _loss_and_grads_raw(params, ops, dense_ids, x[batch], y[batch])
            epoch_loss += loss * batch.size
            for idx, layer_id in enumerate(dense_ids):
                d_w, d_b = grads[layer_id]
                w, b = params[idx]
                params[idx] = (w - cfg.learning_rate * d_w, b - cfg.learning_rate * d_b)
        losses.append(epoch_loss / n)
        logits, _ = _forward_ops(params, ops, x)
        accs.append(float((logits.argmax(axis=1) == y).mean()))

    layers = list(net.layers)
    for idx, layer_id in enumerate(dense_ids):
        w, b = params[idx]
        layers[layer_id] = replace(layers[layer_id], weights=w, bias=b)
    trained = Network(layers=tuple(layers), frl_index=net.frl_index, skip_edges=net.skip_edges)
    return trained, LearningCurve(train_loss=losses, eval_accuracy=accs)


def finetune(net: Network, data: Dataset, cfg: TrainConfig):
    """Training at a tenth of the configured learning rate."""
    return train(net, data, replace(cfg, learning_rate=cfg.learning_rate / 10.0))
