"""Command-line entry point: ``metaprune <subcommand> --config cfg.yaml --seed N --out DIR``.

Every subcommand prints one JSON object on success and exits 0; failures
print ``{"error": ..., "type": ...}`` on one line and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .. import tensorcore as tc
from .checkpoint import load_checkpoint, save_checkpoint
from .curves import acc_vs_speedup_curve, curve_to_csv, flat_region_accuracy, turning_point
from .data import as_tokens
from ..graphcodec import network_to_graph
from ..metanet import MetanetConfig, init_metanetwork
from ..metatrain import DataModelBundle, apply_metanetwork, meta_train, select_metanetwork
from ..netmodel import count_costs, evaluate_accuracy, train
from .experiment import run_seed
from .pipeline import ArchConfig, ExperimentConfig, load_config, make_bundle, report_summary, run_pipeline
from ..pruner import apply_prune, build_pruning_groups, plan_prune


def _out(args) -> Path:
    p = Path(args.out or ".")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.dataset = replace(cfg.dataset, seed=args.seed)
        cfg.probe_seed = args.seed
    return cfg


def _data_for(cfg: ExperimentConfig, spec):
    tr, te = cfg.dataset.load()
    if spec.has_attention:
        tr, te = as_tokens(tr), as_tokens(te)
    return tr, te


def cmd_gen_data(args) -> dict:
    cfg = _cfg(args)
    tr, te = cfg.dataset.load()
    out = _out(args)
    save_checkpoint(tr, out / "train")
    save_checkpoint(te, out / "test")
    return {"train": str(out / "train"), "test": str(out / "test"), "train_size": len(tr), "test_size": len(te)}


def cmd_train_model(args) -> dict:
    cfg = _cfg(args)
    seed = args.seed if args.seed is not None else cfg.probe_seed
    spec, params = cfg.arch.build(seed)
    tr, te = _data_for(cfg, spec)
    params, hist = train(spec, params, tr, replace(cfg.train, seed=seed), test=te)
    bundle = DataModelBundle(spec, params, {"seed": seed, "schedule": asdict(cfg.train)}, "train")
    path = save_checkpoint(bundle, _out(args) / "model")
    return {"model": str(path), "acc": evaluate_accuracy(spec, params, te), "history": hist}


def cmd_prepare(args) -> dict:
    cfg = _cfg(args)
    seed = args.seed if args.seed is not None else cfg.probe_seed
    bundle = make_bundle(cfg, seed, args.role)
    path = save_checkpoint(bundle, _out(args) / f"bundle_{args.role}_{seed}")
    return {"bundle": str(path), **{k: bundle.provenance.get(k) for k in ("trained_acc", "acc", "achieved_initial_speed_up")}}


def cmd_meta_train(args) -> dict:
    cfg = _cfg(args)
    bundles = [load_checkpoint(p) for p in args.bundles]
    tr, _ = _data_for(cfg, bundles[0].spec)
    g = network_to_graph(bundles[0].spec, bundles[0].params)
    net = init_metanetwork(MetanetConfig.for_graph(g, **cfg.metanet), cfg.metatrain.seed)
    mcfg = replace(cfg.metatrain, checkpoint_dir=str(_out(args)))
    if args.seed is not None:
        mcfg = replace(mcfg, seed=args.seed)
    res = meta_train(mcfg, net, bundles, tr)
    return {"checkpoints": res.checkpoint_paths, "history": res.history}


def cmd_curve(args) -> dict:
    cfg = _cfg(args)
    bundle = load_checkpoint(args.bundle)
    tr, te = _data_for(cfg, bundle.spec)
    params = bundle.params
    if args.metanet:
        params = apply_metanetwork(load_checkpoint(args.metanet), bundle)
        if args.finetune_epochs:
            params, _ = train(bundle.spec, params, tr, replace(cfg.metanet_finetune, epochs=args.finetune_epochs))
    curve = acc_vs_speedup_curve(bundle.spec, params, te, cfg.criterion, args.step_fraction, args.max_speed_up)
    path = _out(args) / "curve.csv"
    path.write_text(curve_to_csv(curve))
    return {"curve": str(path), "points": len(curve), "flat_acc": flat_region_accuracy(curve)}


def cmd_select(args) -> dict:
    cfg = _cfg(args)
    ckpts = sorted(
        (str(p) for p in Path(args.checkpoints).glob("meta_epoch_*")), key=lambda s: int(s.rsplit("_", 1)[1])
    )
    probe = load_checkpoint(args.probe)
    tr, te = _data_for(cfg, probe.spec)
    sel = select_metanetwork(
        ckpts, probe, tr, te, args.target_acc, cfg.metanet_finetune, cfg.criterion, cfg.curve_step_fraction, cfg.curve_max_speed_up
    )
    out = _out(args)
    for e, c in sel.curves.items():
        (out / f"curve_epoch_{e + 1}.csv").write_text(curve_to_csv(c))
    return {
        "epoch": sel.epoch + 1,
        "checkpoint": ckpts[sel.epoch],
        "met_target": sel.met_target,
        "flat_acc": {str(e + 1): a for e, a in sel.flat_acc.items()},
        "turning_point": {str(e + 1): turning_point(c, args.threshold) for e, c in sel.curves.items()},
    }


def cmd_prune(args) -> dict:
    cfg = _cfg(args)
    bundle = load_checkpoint(args.bundle)
    gi = build_pruning_groups(bundle.spec)
    plan = plan_prune(bundle.spec, bundle.params, gi, cfg.criterion, args.speed_up)
    spec, params = apply_prune(bundle.spec, bundle.params, plan, gi)
    out = _out(args)
    (out / "plan.json").write_text(plan.to_text())
    path = save_checkpoint(DataModelBundle(spec, params, {**bundle.provenance, "pruned_speed_up": plan.speed_up}, bundle.role), out / "pruned")
    return {"pruned": str(path), "speed_up": plan.speed_up, "removed_dims": len(plan.removals), "flops": plan.predicted_flops}


def cmd_pipeline(args) -> dict:
    cfg = _cfg(args)
    if args.out:
        cfg.out_dir = args.out
    mode = args.mode or ("metanet" if args.metanet else "baseline")
    report = run_pipeline(cfg, metanet=args.metanet, mode=mode)
    if args.out:
        (Path(args.out) / f"summary_{mode}.txt").write_text(report_summary(report) + "\n")
    return {k: report[k] for k in ("mode", "final_acc", "final_speed_up", "finetune_epochs", "wall_time_s")} | {
        "stages": report["stages"]
    }


def cmd_experiment(args) -> dict:
    # the experiment seed shifts every model seed; dataset seed stays as configured
    cfg = load_config(args.config)
    seed = args.seed or 0
    transfer = None
    if args.transfer_blocks:
        transfer = ArchConfig(args.transfer_arch, {**cfg.arch.attrs, "n": args.transfer_blocks})
    result = run_seed(cfg, seed, trend=not args.no_trend, transfer_arch=transfer)
    out = _out(args)
    path = out / f"experiment_seed_{seed}.json"
    path.write_text(json.dumps(result, indent=1, default=str))
    summary = {k: result[k] for k in ("seed", "selected_epoch", "metanet_final_acc", "baseline_final_acc", "margin")}
    if transfer is not None:
        summary["transfer_margin"] = result["transfer"]["margin"]
    return summary | {"report": str(path)}


def cmd_eval(args) -> dict:
    cfg = _cfg(args)
    bundle = load_checkpoint(args.bundle)
    _, te = _data_for(cfg, bundle.spec)
    costs = count_costs(bundle.spec, bundle.params)
    return {"acc": evaluate_accuracy(bundle.spec, bundle.params, te), "flops": costs.flops, "params": costs.params}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="metaprune", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML or JSON experiment config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data, "generate and save a synthetic train/test split")
    add("train-model", cmd_train_model, "train a network from scratch")
    p = add("prepare-data-model", cmd_prepare, "train, initially prune and finetune a data model")
    p.add_argument("--role", choices=("train", "eval"), default="train")
    p = add("meta-train", cmd_meta_train, "train a metanetwork on data models")
    p.add_argument("--bundles", nargs="+", required=True)
    p = add("curve", cmd_curve, "accuracy vs speed-up sweep")
    p.add_argument("--bundle", required=True)
    p.add_argument("--metanet", default=None)
    p.add_argument("--finetune-epochs", type=int, default=0)
    p.add_argument("--step-fraction", type=float, default=0.05)
    p.add_argument("--max-speed-up", type=float, default=4.0)
    p = add("select-metanet", cmd_select, "binary-search meta-training checkpoints")
    p.add_argument("--checkpoints", required=True, help="directory of meta_epoch_<n> checkpoints")
    p.add_argument("--probe", required=True)
    p.add_argument("--target-acc", type=float, required=True)
    p.add_argument("--threshold", type=float, required=True, help="accuracy defining the turning point")
    p = add("prune", cmd_prune, "structurally prune a network to a speed-up")
    p.add_argument("--bundle", required=True)
    p.add_argument("--speed-up", type=float, required=True)
    p = add("pipeline", cmd_pipeline, "run the full pruning pipeline")
    p.add_argument("--metanet", default=None)
    p.add_argument("--mode", choices=("metanet", "baseline"), default=None)
    p = add("experiment", cmd_experiment, "seeded metanetwork-vs-baseline comparison on fresh bundles")
    p.add_argument("--no-trend", action="store_true", help="skip turning points at three checkpoints")
    p.add_argument("--transfer-blocks", type=int, default=0, help="also score a probe with this many residual blocks")
    p.add_argument("--transfer-arch", default="tiny_resnet")
    p = add("eval", cmd_eval, "test accuracy and costs of a saved network")
    p.add_argument("--bundle", required=True)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        tc.configure_threads()
        result = args.fn(args)
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(json.dumps({"error": str(e), "type": type(e).__name__, "command": args.command}))
        return 1
    print(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
