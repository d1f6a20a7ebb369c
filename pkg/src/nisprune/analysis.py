"""Measures of what pruning did to a network.

Four views: weighted response error at the final response layer (how much the
retained outputs moved, weighted by their importance), an upper bound on that
error derived from operator norms of the tail layers, operation and parameter
counts, and the PCA energy of a response matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .errors import ConfigError, DataError, ShapeError
from .model import Network, layer_params, output_shapes, shape_size, slice_layers
from .propagation import bp_matrix

_EPS = 1e-12


def ware(orig: Network, pruned: Network, inputs, s_n, kept_mask) -> float:
    """Importance-weighted mean relative error of the retained final responses.

    For each sample and each retained neuron i the error is
    s_n[i] * |y_pruned - y_orig| / max(|y_orig|, 1e-12), averaged over samples
    and retained neurons. The pruned network's final responses are matched to
    the original's either positionally (same width) or by the kept index set
    (width equal to the number of kept neurons).
    """
    s_n = np.asarray(s_n, dtype=float).ravel()
    kept_mask = np.asarray(kept_mask).ravel()
    orig_resp = engine.batch_responses(orig, inputs, orig.frl_index)
    if s_n.shape[0] != orig_resp.shape[1] or kept_mask.shape[0] != orig_resp.shape[1]:
        raise ShapeError(
            "importance and mask must cover the %d final responses" % orig_resp.shape[1]
        )
    kept = np.flatnonzero(kept_mask)
    if kept.size == 0:
        raise ConfigError("mask keeps no neurons at the final response layer")

    pruned_resp = engine.batch_responses(pruned, inputs, pruned.frl_index)
    if pruned_resp.shape[1] == orig_resp.shape[1]:
        matched = pruned_resp[:, kept]
    elif pruned_resp.shape[1] == kept.size:
        matched = pruned_resp
    else:
        raise ShapeError(
            "pruned final response width %d matches neither the original width %d "
            "nor the kept count %d" % (pruned_resp.shape[1], orig_resp.shape[1], kept.size)
        )

    ref = orig_resp[:, kept]
    rel = np.abs(matched - ref) / np.maximum(np.abs(ref), _EPS)
    return float((rel * s_n[kept]).sum() / (rel.shape[0] * kept.size))


@dataclass
class BoundReport:
    layer_id: int
    lhs: float
    rhs: float
    c_sigma_product: float
    c_x: float
    r_vector: np.ndarray
    holds: bool


def verify_bound(net: Network, inputs, s_n, keep_mask, layer_id: int) -> BoundReport:
    """Check the importance-weighted error bound for pruning at one layer.

    Writing G for the subnetwork from layer_id+1 to the final response layer,
    the accumulated weighted error sum_m <s_n, |G(x_m) - G(s* . x_m)|> is
    bounded by C_sigma * C_x * sum_i r_i (1 - s*_i), where r chains the
    absolute weight matrices of the tail, C_sigma multiplies the activation
    Lipschitz constants, and C_x = max_i sum_m |x_m[i]| over the layer's
    responses x_m.

    The tail must be a chain of dense, conv, average-pool, batch-norm, and
    activation layers; max-pooling and LRN have no linear envelope of this
    form and are rejected, as are skip edges meeting the tail.
    """
    if not 0 <= layer_id < net.frl_index:
        raise ConfigError(
            "bound needs a layer strictly below the final response layer, got %d" % layer_id
        )
    for src, dst in net.skip_edges:
        if layer_id + 1 <= dst <= net.frl_index or layer_id + 1 <= src < net.frl_index:
            raise ConfigError("skip edge (%d, %d) meets the tail; the bound needs a chain" % (src, dst))
    for i in range(layer_id + 1, net.frl_index + 1):
        layer = net.layers[i]
        if layer.kind == "LRN":
            raise ConfigError("layer %d: LRN in the tail has no absolute-weight envelope" % i)
        if layer.kind == "Pool2D" and layer.pool_mode != "avg":
            raise ConfigError("layer %d: max-pooling in the tail is not linear" % i)

    shapes = output_shapes(net)
    width = shape_size(shapes[layer_id])
    s_n = np.asarray(s_n, dtype=float).ravel()
    keep_mask = np.asarray(keep_mask, dtype=float).ravel()
    if s_n.shape[0] != shape_size(shapes[net.frl_index]):
        raise ShapeError("importance length %d does not match the final response" % s_n.shape[0])
    if keep_mask.shape[0] != width:
        raise ShapeError("mask length %d does not match layer %d width %d" % (keep_mask.shape[0], layer_id, width))
    if np.any(s_n < 0):
        raise ShapeError("importance scores must be non-negative")

    resp = engine.batch_responses(net, inputs, layer_id)

    # r = |W_{l+1}|^T ... |W_n|^T s_n, with batch-norm contributing |scale|
    # and activations only their Lipschitz factor.
    r = s_n.copy()
    c_sigma = 1.0
    for i in range(net.frl_index, layer_id, -1):
        layer = net.layers[i]
        if layer.kind == "Activation":
            c_sigma *= engine.activation_lipschitz(layer.activation)
            continue
        if layer.kind == "BatchNorm":
            scale = np.abs(layer.weights)
            if len(shapes[i - 1]) == 3:
                scale = np.repeat(scale, shapes[i - 1][1] * shapes[i - 1][2])
            r = scale * r
            continue
        if layer.kind in ("Dense", "Conv2D"):
            c_sigma *= engine.activation_lipschitz(layer.activation)
        r = r @ bp_matrix(layer)

    tail = slice_layers(net, layer_id + 1, net.frl_index)
    lhs = 0.0
    for row in resp:
        full = engine.flatten_response(engine.forward_sub(tail, engine.unflatten_response(row, shapes[layer_id])))
        masked = engine.flatten_response(
            engine.forward_sub(tail, engine.unflatten_response(row * keep_mask, shapes[layer_id]))
        )
        lhs += float(s_n @ np.abs(full - masked))

    c_x = float(np.abs(resp).sum(axis=0).max())
    rhs = c_sigma * c_x * float(r @ (1.0 - keep_mask))
    return BoundReport(
        layer_id=layer_id,
        lhs=lhs,
        rhs=rhs,
        c_sigma_product=c_sigma,
        c_x=c_x,
        r_vector=r,
        holds=bool(lhs <= rhs * (1.0 + 1e-9)),
    )


@dataclass
class CostReport:
    """Operation and parameter counts, optionally against a reference net."""

    flops: list
    params: list
    total_flops: int
    total_params: int
    flops_reduction_pct: float
    params_reduction_pct: float


def _layer_flops(layer, out_shape) -> int:
    if layer.kind == "Dense":
        out, inp = layer.weights.shape
        return 2 * out * inp
    if layer.kind == "Conv2D":
        g = layer.geometry
        return 2 * g.k * g.k * g.c_in * g.c_out * g.y * g.y
    if layer.kind == "BatchNorm":
        # one multiply and one add per element
        return 2 * shape_size(out_shape)
    # pooling, LRN, and activations: one op per output element
    return shape_size(out_shape)


def count_cost(net: Network, reference: Network = None) -> CostReport:
    """Multiply-accumulates count as two operations; params count every weight
    and bias. Reductions compare totals against ``reference`` (an unpruned
    version of the same model, typically); with no reference the reduction is
    measured against the network itself and comes out zero.
    """
    shapes = output_shapes(net)
    flops = [_layer_flops(layer, shapes[i]) for i, layer in enumerate(net.layers)]
    params = [layer_params(layer) for layer in net.layers]
    total_flops = sum(flops)
    total_params = sum(params)
    if reference is None:
        ref_flops, ref_params = total_flops, total_params
    else:
        ref = count_cost(reference)
        ref_flops, ref_params = ref.total_flops, ref.total_params
    return CostReport(
        flops=flops,
        params=params,
        total_flops=total_flops,
        total_params=total_params,
        flops_reduction_pct=100.0 * (1.0 - total_flops / ref_flops) if ref_flops else 0.0,
        params_reduction_pct=100.0 * (1.0 - total_params / ref_params) if ref_params else 0.0,
    )


@dataclass
class PcaEnergy:
    n_components: int
    degenerate: bool


def pca_energy(responses, threshold: float) -> PcaEnergy:
    """Number of principal components needed to reach the energy threshold.

    Energy is the cumulative fraction of summed covariance eigenvalues
    (responses centered per feature). An all-constant response matrix has no
    variance anywhere; that case is flagged degenerate with zero components.
    """
    if not 0.0 < threshold <= 1.0:
        raise ConfigError("threshold must lie in (0, 1], got %r" % (threshold,))
    resp = np.asarray(responses, dtype=float)
    if resp.ndim != 2 or resp.shape[0] < 2:
        raise DataError("need a 2-d response matrix with at least two samples")
    if not np.isfinite(resp).all():
        raise DataError("responses contain non-finite values")

    centered = resp - resp.mean(axis=0)
    cov = centered.T @ centered / (resp.shape[0] - 1)
    eig = np.linalg.eigvalsh(cov)[::-1]
    eig = np.clip(eig, 0.0, None)
    total = eig.sum()
    if total == 0.0:
        return PcaEnergy(n_components=0, degenerate=True)
    ratios = np.cumsum(eig) / total
    k = int(np.searchsorted(ratios, threshold - 1e-12) + 1)
    return PcaEnergy(n_components=min(k, eig.size), degenerate=False)
