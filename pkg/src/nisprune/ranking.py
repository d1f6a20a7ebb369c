"""Feature scoring over response matrices.

The affinity graph treats each neuron of a response layer as a graph node
and weighs edges by a blend of spread and decorrelation:

    A[i, j] = alpha * max(sig_i, sig_j) + (1 - alpha) * (1 - |rho_ij|)

with zero diagonal, where sig is the per-feature standard deviation rescaled
by the largest one in the matrix and rho is the Pearson correlation (taken as
0 whenever a feature is constant). Scoring then sums weighted walks of every
length through the graph: with damping r chosen as 0.9 / spectral_radius(A),
the series sum_{l>=1} (rA)^l converges to (I - rA)^{-1} - I, and a neuron's
score is its row sum in that matrix. Scores are nonnegative because every
term of the series is.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DataError
from .model import Network
from . import engine

from dataclasses import dataclass


@dataclass(frozen=True, eq=False)
class AffinityGraph:
    a: np.ndarray  # symmetric, nonnegative, zero diagonal
    r: float       # damping, r * spectral_radius(a) < 1
    alpha: float


def spectral_radius(a: np.ndarray, tol: float = 1e-13, max_iter: int = 10000) -> float:
    """Dominant eigenvalue magnitude of a symmetric nonnegative matrix.

    Plain power iteration can stall when eigenvalues come in near (+v, -v)
    pairs, so iterate on a + shift*I with shift = max absolute row sum. That
    keeps the spectrum nonnegative, making the largest eigenvalue dominant,
    and the shift subtracts back out at the end.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    shift = np.abs(a).sum(axis=1).max()
    if shift == 0.0:
        return 0.0
    b = a + shift * np.eye(n)
    v = np.full(n, 1.0 / np.sqrt(n))
    prev = np.inf
    for _ in range(max_iter):
        w = b @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        lam = float(v @ (b @ v))
        if abs(lam - prev) <= tol * max(1.0, abs(lam)):
            break
        prev = lam
    return max(lam - shift, 0.0)


def build_affinity(responses: np.ndarray, alpha: float = 0.5) -> AffinityGraph:
    """Affinity graph over the columns of a (samples x features) matrix."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("alpha must lie in [0, 1], got %r" % (alpha,))
    resp = np.asarray(responses, dtype=float)
    if resp.ndim != 2:
        raise DataError("responses must be a 2-d samples-by-features matrix")
    m, n = resp.shape
    if m < 2:
        raise DataError("need at least 2 samples, got %d" % m)
    if n < 2:
        raise DataError("need at least 2 features, got %d" % n)
    if not np.isfinite(resp).all():
        raise DataError("responses contain non-finite values")

    std = resp.std(axis=0)
    top = std.max()
    sig = std / top if top > 0 else np.zeros(n)

    centered = resp - resp.mean(axis=0)
    rho = np.zeros((n, n))
    varying = std > 0
    if varying.any():
        sub = centered[:, varying]
        denom = m * np.outer(std[varying], std[varying])
        rho[np.ix_(varying, varying)] = np.clip((sub.T @ sub) / denom, -1.0, 1.0)

    a = alpha * np.maximum.outer(sig, sig) + (1.0 - alpha) * (1.0 - np.abs(rho))
    np.fill_diagonal(a, 0.0)

    radius = spectral_radius(a)
    r = 0.9 / radius if radius > 0 else 0.9
    return AffinityGraph(a=a, r=r, alpha=alpha)


def inffs_scores(graph: AffinityGraph) -> np.ndarray:
    """Row sums of (I - rA)^{-1} - I, one nonnegative score per feature."""
    n = graph.a.shape[0]
    system = np.eye(n) - graph.r * graph.a
    try:
        walks = np.linalg.solve(system, np.ones(n)) - 1.0
    except np.linalg.LinAlgError as e:
        raise ConfigError("damping failed to make I - rA invertible: %s" % e) from e
    # The series is nonnegative term by term; clamp the solver's rounding.
    return np.maximum(walks, 0.0)


def magnitude_scores(net: Network, layer_id: int) -> np.ndarray:
    """Absolute-weight mass feeding each neuron of a weighted layer.

    Dense neurons score the absolute sum of their incoming row. Conv channels
    score the absolute sum of their kernel slice, repeated across the
    channel's spatial positions.
    """
    if not 0 <= layer_id < len(net.layers):
        raise ConfigError("layer id %d outside 0..%d" % (layer_id, len(net.layers) - 1))
    layer = net.layers[layer_id]
    if layer.kind == "Dense":
        return np.abs(layer.weights).sum(axis=1)
    if layer.kind == "Conv2D":
        g = layer.geometry
        per_channel = np.abs(layer.weights).sum(axis=(0, 1, 2))
        return np.repeat(per_channel, g.y * g.y)
    raise ConfigError("layer %d (%s) has no weights to rank" % (layer_id, layer.kind))


def per_layer_scores(net: Network, inputs, alpha: float = 0.5) -> dict:
    """Independent affinity scores for every prunable layer's own responses.

    This deliberately ignores how a layer feeds later ones; it exists as the
    layer-by-layer baseline against backward propagation.
    """
    from .model import prunable_layer_ids

    scores = {}
    for layer_id in prunable_layer_ids(net):
        resp = engine.batch_responses(net, inputs, layer_id)
        scores[layer_id] = inffs_scores(build_affinity(resp, alpha))
    return scores
