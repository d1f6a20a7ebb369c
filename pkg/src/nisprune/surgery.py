"""Applying pruning plans and generating baseline plans.

``apply_plan`` turns keep masks into actual structure: dropped dense neurons
lose their weight rows, biases, and the matching columns of whatever consumes
them; dropped conv channels lose their kernel slices and the next layer's
input slices. Pool, LRN, batch-norm, and activation layers own no neurons,
so their shapes just follow whatever survives below them.

Removed units contribute nothing to the survivors (their outgoing columns go
with them, and biases of downstream neurons stay), so the pruned network
computes exactly what the original computes with the masked activations
forced to zero.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ShapeError
from .model import (
    Network,
    PRUNABLE_KINDS,
    layer_params,
    output_shapes,
    prunable_layer_ids,
    shape_size,
    validate,
)
from .propagation import (
    ImportancePlan,
    PlanEntry,
    PruneConfig,
    channel_scores,
    check_ratios,
    keep_count,
    nisp_backward,
    prune_indicator,
)
from . import engine, ranking


@dataclass
class SurgeryReport:
    """Per-layer kept/removed neuron counts and parameter totals."""

    rows: list  # (layer_id, kept, removed, params_before, params_after)
    params_before: int
    params_after: int

    def to_csv(self) -> str:
        lines = ["layer_id,kept,removed,params_before,params_after"]
        for row in self.rows:
            lines.append("%d,%d,%d,%d,%d" % row)
        return "\n".join(lines) + "\n"


def _channel_mask(flat_mask: np.ndarray, channels: int) -> np.ndarray:
    """Collapse a channel-constant neuron mask to one value per channel."""
    per = flat_mask.reshape(channels, -1)
    if not (per == per[:, :1]).all():
        raise ShapeError("conv mask must keep or drop whole channels")
    return per[:, 0]


def effective_masks(net: Network, plan: ImportancePlan) -> list:
    """Flat keep mask over every layer's response.

    Prunable layers up to the FRL take their plan mask; everything else
    inherits from the layer below it (channel-wise across pooling). Layers
    past the FRL always keep their own outputs.
    """
    shapes = output_shapes(net)
    prunable = set(prunable_layer_ids(net))
    for layer_id, entry in plan.entries.items():
        if not 0 <= layer_id <= net.frl_index:
            raise ShapeError("plan entry for layer %d is outside the prunable range" % layer_id)
        if entry.mask.shape[0] != shape_size(shapes[layer_id]):
            raise ShapeError(
                "plan mask for layer %d has %d entries, expected %d"
                % (layer_id, entry.mask.shape[0], shape_size(shapes[layer_id]))
            )
    missing = [i for i in prunable if i not in plan.entries]
    if missing:
        raise ShapeError("plan is missing prunable layers %r" % (missing,))

    masks = []
    for i, layer in enumerate(net.layers):
        if i in prunable:
            masks.append(plan.entries[i].mask.astype(np.uint8))
            continue
        below = masks[i - 1] if i > 0 else None
        if below is None:
            # A shape-preserving first layer reads the raw input, which is
            # never pruned.
            masks.append(np.ones(shape_size(shapes[i]), dtype=np.uint8))
        elif layer.kind in ("Activation", "BatchNorm", "LRN"):
            masks.append(below.copy())
        elif layer.kind == "Pool2D":
            g = layer.geometry
            ch = _channel_mask(below, g.c_in)
            masks.append(np.repeat(ch, g.y * g.y))
        else:  # Dense or Conv2D past the FRL: the classifier head keeps all
            masks.append(np.ones(shape_size(shapes[i]), dtype=np.uint8))
    return masks


def apply_plan(net: Network, plan: ImportancePlan):
    """Build the pruned network plus a SurgeryReport.

    Returns (pruned_net, report). The pruned net validates, keeps the same
    layer count and skip edges, and agrees with masked evaluation of the
    original bit for bit.
    """
    shapes = output_shapes(net)
    masks = effective_masks(net, plan)

    for src, dst in net.skip_edges:
        if not np.array_equal(masks[src], masks[dst]):
            raise ShapeError(
                "skip edge (%d, %d) would join a %d-unit response to a %d-unit one; "
                "both ends must share one mask"
                % (src, dst, int(masks[src].sum()), int(masks[dst].sum()))
            )

    new_layers = []
    rows = []
    for i, layer in enumerate(net.layers):
        in_mask = masks[i - 1] if i > 0 else None
        own = masks[i]
        if layer.kind == "Dense":
            keep_out = np.flatnonzero(own)
            w, b = layer.weights, layer.bias
            if in_mask is not None:
                w = w[:, np.flatnonzero(in_mask)]
            new = replace(layer, weights=w[keep_out].copy(), bias=b[keep_out].copy())
        elif layer.kind == "Conv2D":
            g = layer.geometry
            ch_out = np.flatnonzero(_channel_mask(own, g.c_out))
            kernel = layer.weights
            c_in = g.c_in
            if in_mask is not None:
                ch_in = np.flatnonzero(_channel_mask(in_mask, g.c_in))
                kernel = kernel[:, :, ch_in, :]
                c_in = len(ch_in)
            new = replace(
                layer,
                weights=kernel[:, :, :, ch_out].copy(),
                bias=layer.bias[ch_out].copy(),
                geometry=replace(g, c_in=c_in, c_out=len(ch_out)),
            )
        elif layer.kind in ("Pool2D", "LRN"):
            g = layer.geometry
            ch = int(_channel_mask(own, g.c_out).sum())
            new = replace(layer, geometry=replace(g, c_in=ch, c_out=ch))
        elif layer.kind == "BatchNorm":
            if in_mask is None:
                new = layer
            elif len(shapes[i - 1]) == 3:
                ch = np.flatnonzero(_channel_mask(in_mask, shapes[i - 1][0]))
                new = replace(layer, weights=layer.weights[ch].copy(), bias=layer.bias[ch].copy())
            else:
                keep = np.flatnonzero(in_mask)
                new = replace(layer, weights=layer.weights[keep].copy(), bias=layer.bias[keep].copy())
        elif layer.kind == "Activation":
            new = layer
        else:
            raise ShapeError("unknown layer kind %r" % (layer.kind,))

        new_layers.append(new)
        width = shape_size(shapes[i])
        kept = int(own.sum())
        rows.append((i, kept, width - kept, layer_params(layer), layer_params(new)))

    pruned = Network(layers=tuple(new_layers), frl_index=net.frl_index, skip_edges=net.skip_edges)
    report = validate(pruned)
    if not report.ok:
        raise ShapeError(
            "surgery produced an inconsistent network: "
            + "; ".join("layer %d: %s" % v for v in report.violations)
        )
    summary = SurgeryReport(
        rows=rows,
        params_before=sum(r[3] for r in rows),
        params_after=sum(r[4] for r in rows),
    )
    return pruned, summary


# ---------------------------------------------------------------------------
# plan builders

def _plan_from_layer_scores(net: Network, cfg: PruneConfig, scores_by_layer: dict) -> ImportancePlan:
    """Turn independent per-layer scores into masks, honoring skip sharing.

    Walks from the FRL downward so a merge layer's mask is fixed before its
    skip source needs one; the source then reuses it, keeping both ends of
    the edge the same width.
    """
    check_ratios(net, cfg)
    shapes = output_shapes(net)
    merge_sources = {}
    for src, dst in net.skip_edges:
        if dst <= net.frl_index:
            merge_sources.setdefault(dst, []).append(src)

    forced = {}
    entries = {}
    for layer_id in sorted(scores_by_layer, reverse=True):
        layer = net.layers[layer_id]
        scores = np.asarray(scores_by_layer[layer_id], dtype=float).ravel()
        if scores.shape[0] != shape_size(shapes[layer_id]):
            raise ShapeError(
                "scores for layer %d have %d entries, expected %d"
                % (layer_id, scores.shape[0], shape_size(shapes[layer_id]))
            )
        fraction = cfg.ratios.get(layer_id, 1.0)
        if layer.kind == "Conv2D":
            g = layer.geometry
            ch = channel_scores(scores.reshape(g.c_out, g.y, g.y))
            if layer_id in forced:
                mask = forced[layer_id]
            else:
                mask = np.repeat(
                    prune_indicator(ch, keep_count(g.c_out, fraction)).astype(np.uint8),
                    g.y * g.y,
                )
            entries[layer_id] = PlanEntry(layer_id, scores, mask, ch)
        else:
            if layer_id in forced:
                mask = forced[layer_id]
            else:
                mask = prune_indicator(scores, keep_count(scores.shape[0], fraction))
            entries[layer_id] = PlanEntry(layer_id, scores, mask, None)

        mask = entries[layer_id].mask
        for src in merge_sources.get(layer_id, ()):
            if net.layers[src].kind not in PRUNABLE_KINDS:
                if not mask.all():
                    raise ConfigError(
                        "skip edge (%d, %d): pruning the merge needs a prunable source layer"
                        % (src, layer_id)
                    )
                continue
            if src in forced and not np.array_equal(forced[src], mask):
                raise ConfigError("layer %d sits on two skip edges that demand different masks" % src)
            forced[src] = mask

    ordered = {lid: entries[lid] for lid in sorted(entries)}
    return ImportancePlan(entries=ordered)


def nisp_plan(net: Network, inputs, cfg: PruneConfig, alpha: float = 0.5) -> ImportancePlan:
    """Affinity-rank the final responses, then propagate backward."""
    resp = engine.batch_responses(net, inputs, net.frl_index)
    s_n = ranking.inffs_scores(ranking.build_affinity(resp, alpha))
    return nisp_backward(net, s_n, cfg)


def magnitude_plan(net: Network, cfg: PruneConfig) -> ImportancePlan:
    """Rank the final responses by absolute weight mass, then propagate."""
    s_n = ranking.magnitude_scores(net, net.frl_index)
    return nisp_backward(net, s_n, cfg)


def lbl_plan(net: Network, inputs, cfg: PruneConfig, alpha: float = 0.5) -> ImportancePlan:
    """Rank every prunable layer independently; nothing propagates."""
    scores = ranking.per_layer_scores(net, inputs, alpha)
    return _plan_from_layer_scores(net, cfg, scores)


def random_plan(net: Network, cfg: PruneConfig, seed: int) -> ImportancePlan:
    """Uniformly random keep-sets of the configured sizes.

    Drawing iid uniform scores and keeping the top N picks a uniformly
    random N-subset; the recorded importance vectors are the masks
    themselves, as a reminder that no ranking happened.
    """
    rng = np.random.default_rng(seed)
    shapes = output_shapes(net)
    scores = {}
    for layer_id in prunable_layer_ids(net):
        layer = net.layers[layer_id]
        if layer.kind == "Conv2D":
            g = layer.geometry
            scores[layer_id] = np.repeat(rng.random(g.c_out), g.y * g.y)
        else:
            scores[layer_id] = rng.random(shape_size(shapes[layer_id]))
    plan = _plan_from_layer_scores(net, cfg, scores)
    entries = {}
    for layer_id, entry in plan.entries.items():
        ch = None
        if entry.channel_scores is not None:
            g = net.layers[layer_id].geometry
            ch = _channel_mask(entry.mask, g.c_out).astype(float)
        entries[layer_id] = PlanEntry(layer_id, entry.mask.astype(float), entry.mask, ch)
    return ImportancePlan(entries=entries)
