"""Forward evaluation, response extraction, and simple prediction metrics."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .model import Layer, Network, SubNetwork

# Local response normalization runs with fixed constants; importance
# propagation never looks at them.
LRN_BIAS = 1.0
LRN_ALPHA = 1e-4
LRN_BETA = 0.75

_LIPSCHITZ = {"Identity": 1.0, "ReLU": 1.0, "Tanh": 1.0, "Sigmoid": 0.25}


def apply_activation(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "Identity":
        return z
    if kind == "ReLU":
        return np.maximum(z, 0.0)
    if kind == "Tanh":
        return np.tanh(z)
    if kind == "Sigmoid":
        # Split by sign so exp never overflows.
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    raise ConfigError("unknown activation %r" % (kind,))


def activation_lipschitz(kind: str) -> float:
    """Smallest constant C with |sigma(a) - sigma(b)| <= C |a - b|."""
    try:
        return _LIPSCHITZ[kind]
    except KeyError:
        raise ConfigError("unknown activation %r" % (kind,)) from None


def flatten_response(value: np.ndarray) -> np.ndarray:
    """Channel-major then row-major flattening; the package-wide convention."""
    return np.asarray(value, dtype=float).ravel()


def unflatten_response(vec: np.ndarray, shape) -> np.ndarray:
    vec = np.asarray(vec, dtype=float)
    if vec.size != int(np.prod(shape)):
        raise ShapeError("cannot reshape %d values into %r" % (vec.size, (shape,)))
    return vec.reshape(shape)


def _ordered_sum(terms: np.ndarray, axis: int) -> np.ndarray:
    # Strict first-to-last accumulation. Zero contributions then leave every
    # partial sum untouched, so a pruned network and the original network
    # with masked activations produce bit-identical responses.
    return np.add.accumulate(terms, axis=axis).take(-1, axis=axis)


def _dense_forward(layer: Layer, x: np.ndarray) -> np.ndarray:
    v = x.ravel()
    w = layer.weights
    if v.shape[0] != w.shape[1]:
        raise ShapeError("dense layer expects %d inputs, got %d" % (w.shape[1], v.shape[0]))
    z = _ordered_sum(w * v[None, :], axis=1) + layer.bias
    return apply_activation(layer.activation, z)


def _conv_forward(layer: Layer, x: np.ndarray) -> np.ndarray:
    g = layer.geometry
    if x.shape != (g.c_in, g.x, g.x):
        raise ShapeError("conv layer expects %r, got %r" % ((g.c_in, g.x, g.x), x.shape))
    xp = np.pad(x, ((0, 0), (g.p, g.p), (g.p, g.p)))
    kernel = layer.weights  # (k, k, c_in, c_out)
    # One (c_in * k * k, c_out) contribution table per window, reduced in a
    # fixed channel-major order; see _ordered_sum for why.
    kern_cm = np.ascontiguousarray(kernel.transpose(2, 0, 1, 3)).reshape(-1, g.c_out)
    out = np.empty((g.c_out, g.y, g.y))
    for i in range(g.y):
        for j in range(g.y):
            win = xp[:, i * g.s : i * g.s + g.k, j * g.s : j * g.s + g.k]
            terms = win.reshape(-1, 1) * kern_cm
            out[:, i, j] = _ordered_sum(terms, axis=0) + layer.bias
    return apply_activation(layer.activation, out)


def _pool_forward(layer: Layer, x: np.ndarray) -> np.ndarray:
    g = layer.geometry
    if x.shape != (g.c_in, g.x, g.x):
        raise ShapeError("pool layer expects %r, got %r" % ((g.c_in, g.x, g.x), x.shape))
    xp = np.pad(x, ((0, 0), (g.p, g.p), (g.p, g.p)))
    out = np.empty((g.c_out, g.y, g.y))
    for i in range(g.y):
        for j in range(g.y):
            win = xp[:, i * g.s : i * g.s + g.k, j * g.s : j * g.s + g.k]
            if layer.pool_mode == "max":
                out[:, i, j] = win.max(axis=(1, 2))
            else:
                out[:, i, j] = win.mean(axis=(1, 2))
    return out


def _lrn_forward(layer: Layer, x: np.ndarray) -> np.ndarray:
    g = layer.geometry
    if x.shape != (g.c_in, g.x, g.x):
        raise ShapeError("LRN layer expects %r, got %r" % ((g.c_in, g.x, g.x), x.shape))
    half = (layer.lrn_local_size - 1) // 2
    sq = x * x
    out = np.empty_like(x)
    for c in range(g.c_in):
        lo, hi = max(0, c - half), min(g.c_in, c + half + 1)
        denom = (LRN_BIAS + LRN_ALPHA * sq[lo:hi].sum(axis=0)) ** LRN_BETA
        out[c] = x[c] / denom
    return out


def _batchnorm_forward(layer: Layer, x: np.ndarray) -> np.ndarray:
    scale, shift = layer.weights, layer.bias
    if x.ndim == 1:
        if x.shape[0] != scale.shape[0]:
            raise ShapeError("batch-norm over %d entries got %d" % (scale.shape[0], x.shape[0]))
        return scale * x + shift
    if x.ndim == 3 and x.shape[0] == scale.shape[0]:
        return scale[:, None, None] * x + shift[:, None, None]
    raise ShapeError("batch-norm over %d entries cannot consume %r" % (scale.shape[0], x.shape))


def layer_forward(layer: Layer, x: np.ndarray) -> np.ndarray:
    if layer.kind == "Dense":
        return _dense_forward(layer, x)
    if layer.kind == "Conv2D":
        return _conv_forward(layer, x)
    if layer.kind == "Pool2D":
        return _pool_forward(layer, x)
    if layer.kind == "LRN":
        return _lrn_forward(layer, x)
    if layer.kind == "BatchNorm":
        return _batchnorm_forward(layer, x)
    if layer.kind == "Activation":
        return apply_activation(layer.activation, x)
    raise ShapeError("unknown layer kind %r" % (layer.kind,))


def forward(net: Network, x) -> list:
    """Full activation trace: [input, response_0, ..., response_last].

    A skip edge (src, dst) adds the stored response of layer src to the
    output of layer dst after dst's own activation.
    """
    trace = [np.asarray(x, dtype=float)]
    merges = {}
    for src, dst in net.skip_edges:
        merges.setdefault(dst, []).append(src)
    for i, layer in enumerate(net.layers):
        value = layer_forward(layer, trace[-1])
        for src in merges.get(i, ()):
            stored = trace[src + 1]
            if stored.shape != value.shape:
                raise ShapeError(
                    "skip edge (%d, %d) joins shapes %r and %r"
                    % (src, i, stored.shape, value.shape)
                )
            value = value + stored
        trace.append(value)
    return trace


def forward_sub(sub: SubNetwork, x) -> np.ndarray:
    """Output of the layer window on a raw input value."""
    local = [np.asarray(x, dtype=float)]
    merges = {}
    for src, dst in sub.parent.skip_edges:
        if sub.start <= src and dst <= sub.end:
            merges.setdefault(dst, []).append(src)
    for i in range(sub.start, sub.end + 1):
        value = layer_forward(sub.parent.layers[i], local[-1])
        for src in merges.get(i, ()):
            value = value + local[src - sub.start + 1]
        local.append(value)
    return local[-1]


def batch_responses(net: Network, inputs, layer_id: int) -> np.ndarray:
    """Rows of flattened responses of one layer, one row per sample."""
    if not 0 <= layer_id < len(net.layers):
        raise ConfigError("layer id %d outside 0..%d" % (layer_id, len(net.layers) - 1))
    rows = [flatten_response(forward(net, x)[layer_id + 1]) for x in inputs]
    if not rows:
        raise DataError("no samples to evaluate")
    return np.stack(rows)


def predict(net: Network, inputs) -> np.ndarray:
    """Top-1 class per sample; argmax ties go to the lowest index."""
    out = batch_responses(net, inputs, len(net.layers) - 1)
    return np.argmax(out, axis=1)


def accuracy(net: Network, inputs, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) != len(inputs):
        raise DataError("%d samples but %d labels" % (len(inputs), len(labels)))
    if len(labels) == 0:
        raise DataError("no samples to evaluate")
    out = batch_responses(net, inputs, len(net.layers) - 1)
    if labels.max() >= out.shape[1] or labels.min() < 0:
        raise DataError("labels outside the network's %d outputs" % out.shape[1])
    return float(np.mean(np.argmax(out, axis=1) == labels))


def top1_agreement(net_a: Network, net_b: Network, inputs) -> float:
    """Fraction of samples where two networks pick the same class."""
    if len(inputs) == 0:
        raise DataError("no samples to evaluate")
    return float(np.mean(predict(net_a, inputs) == predict(net_b, inputs)))
