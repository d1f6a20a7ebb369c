"""Command-line wiring: rank, prune, compare, verify.

Every command reads a model JSON plus a dataset CSV, computes everything it
needs up front, then writes its outputs through atomic renames, so a failed
run never leaves partial files behind. Outputs land in the directory given
by --out.

Exit codes: 0 success, 2 usage or configuration error, 3 unreadable or
inconsistent model/data files, 4 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import analysis, engine, ranking, surgery, trainer
from .datasets import Dataset, load_dataset
from .errors import ConfigError, DataError, ModelFormatError, ShapeError
from .model import (
    Network,
    atomic_write_bytes,
    atomic_write_text,
    output_shapes,
    prunable_layer_ids,
    read_model,
    save_model,
    shape_size,
)
from .propagation import ImportancePlan, PruneConfig, keep_count, plan_to_json

STRATEGIES = ("nisp", "nisp-mag", "lbl", "random", "scratch")
_BATCH_SIZE = 32


@dataclass(frozen=True)
class ExperimentConfig:
    model: str
    data: str
    out: str
    strategies: tuple
    ratios: dict
    alpha: float
    seeds: tuple
    epochs: int
    learning_rate: float
    pca_threshold: float
    trials: int
    layer: int


def _parse_ratio(text: str):
    try:
        layer_text, frac_text = text.split("=", 1)
        return int(layer_text), float(frac_text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected layerid=fraction, got %r" % text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nisprune",
        description="Importance-propagated pruning of small feed-forward networks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--model", required=True, help="model JSON path")
        p.add_argument("--data", required=True, help="dataset CSV path")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--alpha", type=float, default=0.5, help="affinity mixing weight")
        p.add_argument("--seed", type=int, action="append", help="rng seed (repeatable where it makes sense)")

    p_rank = sub.add_parser("rank", help="score the final response layer")
    common(p_rank)
    p_rank.add_argument("--pca-threshold", type=float, default=None,
                        help="also print per-layer component counts at this energy level")
    p_rank.set_defaults(func=cmd_rank)

    def ratio_flags(p):
        p.add_argument("--ratio-all", type=float, default=None,
                       help="keep fraction for every prunable layer (skip sources inherit)")
        p.add_argument("--ratio", type=_parse_ratio, action="append", default=None,
                       metavar="LAYER=FRAC", help="keep fraction for one layer (repeatable)")

    p_prune = sub.add_parser("prune", help="build a plan and apply it")
    common(p_prune)
    ratio_flags(p_prune)
    p_prune.add_argument("--strategy", choices=STRATEGIES, default="nisp")
    p_prune.set_defaults(func=cmd_prune)

    p_cmp = sub.add_parser("compare", help="prune with several strategies and fine-tune")
    common(p_cmp)
    ratio_flags(p_cmp)
    p_cmp.add_argument("--strategy", choices=STRATEGIES, action="append", default=None,
                       help="strategy to include (repeatable; default: all)")
    p_cmp.add_argument("--epochs", type=int, default=10)
    p_cmp.add_argument("--lr", type=float, default=0.1, help="full learning rate; fine-tuning uses a tenth")
    p_cmp.set_defaults(func=cmd_compare)

    p_ver = sub.add_parser("verify", help="fuzz the pruning error bound at one layer")
    common(p_ver)
    p_ver.add_argument("--layer", type=int, required=True)
    p_ver.add_argument("--ratio-all", type=float, default=0.5, help="keep fraction for the trial masks")
    p_ver.add_argument("--trials", type=int, default=100)
    p_ver.set_defaults(func=cmd_verify)

    return parser


def _config_from_args(args) -> ExperimentConfig:
    ratios = {}
    if getattr(args, "ratio_all", None) is not None:
        ratios["all"] = args.ratio_all
    for layer_id, frac in getattr(args, "ratio", None) or ():
        ratios[layer_id] = frac
    strategies = getattr(args, "strategy", None)
    if strategies is None:
        strategies = STRATEGIES if args.command == "compare" else ("nisp",)
    elif isinstance(strategies, str):
        strategies = (strategies,)
    else:
        strategies = tuple(dict.fromkeys(strategies))
    return ExperimentConfig(
        model=args.model,
        data=args.data,
        out=args.out,
        strategies=strategies,
        ratios=ratios,
        alpha=args.alpha,
        seeds=tuple(args.seed) if args.seed else (0,),
        epochs=getattr(args, "epochs", 0),
        learning_rate=getattr(args, "lr", 0.1),
        pca_threshold=getattr(args, "pca_threshold", None),
        trials=getattr(args, "trials", 0),
        layer=getattr(args, "layer", None),
    )


def _load(cfg: ExperimentConfig):
    net = read_model(cfg.model)
    data = load_dataset(cfg.data)
    return net, data


def _prune_config(net: Network, cfg: ExperimentConfig) -> PruneConfig:
    """Expand --ratio-all over the prunable layers, minus skip sources."""
    sources = {src for src, _ in net.skip_edges}
    ratios = {}
    if "all" in cfg.ratios:
        frac = cfg.ratios["all"]
        ratios = {i: frac for i in prunable_layer_ids(net) if i not in sources}
    for layer_id, frac in cfg.ratios.items():
        if layer_id != "all":
            ratios[layer_id] = frac
    return PruneConfig(ratios=ratios)


def _frl_scores(net: Network, data: Dataset, alpha: float) -> np.ndarray:
    resp = engine.batch_responses(net, data.inputs, net.frl_index)
    return ranking.inffs_scores(ranking.build_affinity(resp, alpha))


def _build_plan(net, data, pc, strategy, alpha, seed) -> ImportancePlan:
    if strategy == "nisp":
        return surgery.nisp_plan(net, data.inputs, pc, alpha)
    if strategy == "nisp-mag":
        return surgery.magnitude_plan(net, pc)
    if strategy == "lbl":
        return surgery.lbl_plan(net, data.inputs, pc, alpha)
    if strategy == "random":
        return surgery.random_plan(net, pc, seed)
    raise ConfigError("strategy %r does not produce a pruning plan" % strategy)


def _out_path(cfg: ExperimentConfig, name: str) -> str:
    os.makedirs(cfg.out, exist_ok=True)
    return os.path.join(cfg.out, name)


def cmd_rank(cfg: ExperimentConfig) -> None:
    net, data = _load(cfg)
    scores = _frl_scores(net, data, cfg.alpha)
    lines = ["neuron_index,score"]
    for i in np.argsort(-scores, kind="stable"):
        lines.append("%d,%s" % (i, repr(float(scores[i]))))
    if cfg.pca_threshold is not None:
        for layer_id in range(net.frl_index + 1):
            resp = engine.batch_responses(net, data.inputs, layer_id)
            energy = analysis.pca_energy(resp, cfg.pca_threshold)
            note = " (degenerate)" if energy.degenerate else ""
            print("layer %d: %d of %d components reach %g energy%s"
                  % (layer_id, energy.n_components, resp.shape[1], cfg.pca_threshold, note))
    atomic_write_text(_out_path(cfg, "ranking.csv"), "\n".join(lines) + "\n")


def cmd_prune(cfg: ExperimentConfig) -> None:
    net, data = _load(cfg)
    strategy = cfg.strategies[0]
    if strategy == "scratch":
        raise ConfigError("scratch training has no pruning plan; use it with compare")
    pc = _prune_config(net, cfg)
    plan = _build_plan(net, data, pc, strategy, cfg.alpha, cfg.seeds[0])
    pruned, report = surgery.apply_plan(net, plan)
    model_bytes = save_model(pruned)
    plan_bytes = plan_to_json(plan)
    report_text = report.to_csv()
    atomic_write_bytes(_out_path(cfg, "pruned_model.json"), model_bytes)
    atomic_write_bytes(_out_path(cfg, "plan.json"), plan_bytes)
    atomic_write_text(_out_path(cfg, "surgery.csv"), report_text)


def cmd_compare(cfg: ExperimentConfig) -> None:
    net, data = _load(cfg)
    if data.labels is None:
        raise DataError("compare needs labeled data")
    trainer.check_trainable(net)
    pc = _prune_config(net, cfg)
    frl = net.frl_index

    rows = []
    for strategy in cfg.strategies:
        for seed in cfg.seeds:
            train_cfg = trainer.TrainConfig(
                learning_rate=cfg.learning_rate, epochs=cfg.epochs,
                batch_size=_BATCH_SIZE, seed=seed,
            )
            if strategy == "scratch":
                plan = surgery.random_plan(net, pc, seed)
                skeleton, _ = surgery.apply_plan(net, plan)
                pruned = trainer.reinit(skeleton, seed)
                tuned, _ = trainer.train(pruned, data, train_cfg)
            else:
                plan = _build_plan(net, data, pc, strategy, cfg.alpha, seed)
                pruned, _ = surgery.apply_plan(net, plan)
                tuned, _ = trainer.finetune(pruned, data, train_cfg)
            rows.append((
                strategy,
                seed,
                engine.accuracy(pruned, data.inputs, data.labels),
                engine.accuracy(tuned, data.inputs, data.labels),
                analysis.ware(net, pruned, data.inputs, plan.scores(frl), plan.mask(frl)),
                analysis.count_cost(pruned, reference=net).flops_reduction_pct,
                engine.top1_agreement(net, tuned, data.inputs),
            ))

    rows.sort(key=lambda row: (row[0], row[1]))
    lines = ["strategy,seed,pre_finetune_accuracy,post_finetune_accuracy,ware,flops_reduction_pct,top1_agreement"]
    for strategy, seed, pre, post, ware_val, flops, agree in rows:
        lines.append("%s,%d,%s,%s,%s,%s,%s" % (
            strategy, seed, repr(float(pre)), repr(float(post)),
            repr(float(ware_val)), repr(float(flops)), repr(float(agree)),
        ))
    atomic_write_text(_out_path(cfg, "comparison.csv"), "\n".join(lines) + "\n")


def cmd_verify(cfg: ExperimentConfig) -> None:
    net, data = _load(cfg)
    if cfg.trials < 0:
        raise ConfigError("trials must be non-negative")
    fraction = cfg.ratios.get("all", 0.5)
    width = shape_size(output_shapes(net)[cfg.layer]) if 0 <= cfg.layer < len(net.layers) else 0
    if width == 0:
        raise ConfigError("layer %r is out of range" % (cfg.layer,))
    keep = keep_count(width, fraction)
    s_n = _frl_scores(net, data, cfg.alpha)

    rng = np.random.default_rng(cfg.seeds[0])
    results = []
    violations = 0
    ratios = []
    for trial in range(cfg.trials):
        mask = np.zeros(width)
        mask[rng.permutation(width)[:keep]] = 1.0
        report = analysis.verify_bound(net, data.inputs, s_n, mask, cfg.layer)
        slack = report.rhs / report.lhs if report.lhs > 0 else None
        if slack is not None:
            ratios.append(slack)
        if not report.holds:
            violations += 1
        results.append({
            "trial": trial,
            "lhs": report.lhs,
            "rhs": report.rhs,
            "holds": report.holds,
            "slack_ratio": slack,
        })

    doc = {
        "layer_id": cfg.layer,
        "trials": cfg.trials,
        "keep_fraction": fraction,
        "violations": violations,
        "slack_ratio_min": min(ratios) if ratios else None,
        "slack_ratio_median": float(np.median(ratios)) if ratios else None,
        "slack_ratio_max": max(ratios) if ratios else None,
        "results": results,
    }
    atomic_write_text(_out_path(cfg, "bound_report.json"),
                      json.dumps(doc, indent=2, sort_keys=True) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_info:
        return int(exit_info.code or 0)
    try:
        cfg = _config_from_args(args)
        args.func(cfg)
    except ConfigError as err:
        print("error: %s" % err, file=sys.stderr)
        return 2
    except (ModelFormatError, ShapeError, DataError, OSError) as err:
        print("error: %s" % err, file=sys.stderr)
        return 3
    except Exception as err:  # noqa: BLE001 - last-resort mapping to an exit code
        print("internal error: %s" % err, file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
