"""Seeded metanetwork-vs-baseline experiment built from the pipeline pieces.

One seed prepares the train bundles and a probe, meta-trains, picks a
checkpoint by bisection on flat-region accuracy, then runs both pipeline
modes on the probe.  Every number the run reports is collected in a plain
dict so repeated runs can be compared for exact equality.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, replace

from ..graphcodec import network_to_graph
from ..metanet import MetanetConfig, Metanetwork, init_metanetwork, load_metanet_state
from ..metatrain import DataModelBundle, MetaTrainResult, binary_search_epochs, finetune_and_curve, meta_train
from ..netmodel import train
from .curves import CurveRecord, acc_vs_speedup_curve, curve_dicts, turning_point
from .data import Dataset
from .pipeline import ArchConfig, ExperimentConfig, load_data, make_bundle, run_pipeline

log = logging.getLogger(__name__)

SEED_STRIDE = 100


@dataclass
class TrainedMetanet:
    cfg: MetanetConfig
    result: MetaTrainResult

    def at(self, epoch: int) -> Metanetwork:
        return load_metanet_state(self.cfg, self.result.states[epoch])


def seeded_config(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Shifts every model seed of ``cfg`` so distinct experiment seeds never share a network.

    Meta-training also takes the experiment's pruning criterion, so the
    sparsity loss and the final prune score dimensions the same way.
    """
    off = SEED_STRIDE * seed
    return replace(
        cfg,
        train_seeds=tuple(s + off for s in cfg.train_seeds),
        probe_seed=cfg.probe_seed + off,
        metatrain=replace(cfg.metatrain, seed=cfg.metatrain.seed + off, criterion=cfg.criterion),
    )


def prepare_bundles(cfg: ExperimentConfig, data: tuple[Dataset, Dataset]) -> tuple[list[DataModelBundle], DataModelBundle]:
    trains = [make_bundle(cfg, s, "train", data) for s in cfg.train_seeds]
    return trains, make_bundle(cfg, cfg.probe_seed, "eval", data)


def train_metanet(cfg: ExperimentConfig, bundles: list[DataModelBundle], data: tuple[Dataset, Dataset]) -> TrainedMetanet:
    graph = network_to_graph(bundles[0].spec, bundles[0].params)
    mcfg = MetanetConfig.for_graph(graph, **cfg.metanet)
    net = init_metanetwork(mcfg, cfg.metatrain.seed)
    return TrainedMetanet(mcfg, meta_train(cfg.metatrain, net, bundles, data[0]))


def baseline_curve(cfg: ExperimentConfig, probe: DataModelBundle, data: tuple[Dataset, Dataset]) -> list[CurveRecord]:
    """Curve of the probe after the same finetune the metanetwork branch gets, minus the metanetwork."""
    params, _ = train(probe.spec, probe.params, data[0], cfg.metanet_finetune)
    return acc_vs_speedup_curve(probe.spec, params, data[1], cfg.criterion, cfg.curve_step_fraction, cfg.curve_max_speed_up)


def probe_epochs(n_epochs: int, count: int = 3) -> list[int]:
    """``count`` increasing checkpoint indices spread evenly over the run, ending at the last one."""
    picks = sorted({max(0, round(n_epochs * (i + 1) / count) - 1) for i in range(count)})
    if len(picks) < count:
        raise ValueError(f"need at least {count} meta-training epochs to probe {count} checkpoints")
    return picks


def compare_on_probe(
    cfg: ExperimentConfig,
    trained: TrainedMetanet,
    probe: DataModelBundle,
    data: tuple[Dataset, Dataset],
    trend_epochs: list[int] | None = None,
) -> dict:
    """Select a checkpoint for ``probe``, then run both pipeline modes on it.

    The selection target and the turning-point threshold are both measured
    from the probe's own baseline curve, so they transfer across architectures.
    """
    t0 = time.perf_counter()
    base_curve = baseline_curve(cfg, probe, data)
    base_acc = base_curve[0].acc
    evaluate = finetune_and_curve(
        trained.at, probe, data[0], data[1], cfg.metanet_finetune, cfg.criterion, cfg.curve_step_fraction, cfg.curve_max_speed_up
    )
    cache: dict[int, list[CurveRecord]] = {}

    def cached(epoch: int) -> list[CurveRecord]:
        if epoch not in cache:
            cache[epoch] = evaluate(epoch)
        return cache[epoch]

    target = base_acc - cfg.selection_drop
    sel = binary_search_epochs(len(trained.result.states), cached, target)
    threshold = base_acc - cfg.turning_drop
    trend = {}
    for e in trend_epochs or []:
        trend[e + 1] = turning_point(cached(e), threshold)
    meta = run_pipeline(cfg, trained.at(sel.epoch), probe, data, "metanet", curves=False)
    base = run_pipeline(cfg, None, probe, data, "baseline", curves=False)
    return {
        "probe_acc": probe.provenance.get("acc"),
        "baseline_curve_acc": base_acc,
        "selection_target": target,
        "selected_epoch": sel.epoch + 1,
        "met_target": sel.met_target,
        "flat_acc": {e + 1: a for e, a in sorted(sel.flat_acc.items())},
        "turning_threshold": threshold,
        "baseline_turning_point": turning_point(base_curve, threshold),
        "turning_points": trend,
        "metanet_final_acc": meta["final_acc"],
        "baseline_final_acc": base["final_acc"],
        "metanet_speed_up": meta["final_speed_up"],
        "baseline_speed_up": base["final_speed_up"],
        "margin": meta["final_acc"] - base["final_acc"],
        "metanet_stages": [{k: s[k] for k in ("stage", "acc", "flops", "speed_up")} for s in meta["stages"]],
        "baseline_stages": [{k: s[k] for k in ("stage", "acc", "flops", "speed_up")} for s in base["stages"]],
        "baseline_curve": curve_dicts(base_curve),
        "compare_time_s": time.perf_counter() - t0,
    }


def run_seed(
    cfg: ExperimentConfig,
    seed: int,
    trend: bool = True,
    transfer_arch: ArchConfig | None = None,
) -> dict:
    """Full experiment for one seed; optionally also scores a probe of ``transfer_arch``."""
    t0 = time.perf_counter()
    scfg = seeded_config(cfg, seed)
    data = load_data(scfg)
    bundles, probe = prepare_bundles(scfg, data)
    t_prep = time.perf_counter()
    trained = train_metanet(scfg, bundles, data)
    t_meta = time.perf_counter()
    epochs = probe_epochs(scfg.metatrain.epochs) if trend else None
    out = {
        "seed": seed,
        "criterion": asdict(scfg.criterion),
        "bundle_accs": [b.provenance.get("acc") for b in bundles],
        "meta_history": trained.result.history,
        **compare_on_probe(scfg, trained, probe, data, epochs),
    }
    out["timing_s"] = {
        "prepare": t_prep - t0,
        "meta_train": t_meta - t_prep,
        "total": time.perf_counter() - t0,
    }
    if transfer_arch is not None:
        t1 = time.perf_counter()
        tcfg = replace(scfg, arch=transfer_arch)
        tprobe = make_bundle(tcfg, tcfg.probe_seed, "eval", data)
        out["transfer"] = compare_on_probe(tcfg, trained, tprobe, data)
        out["transfer"]["timing_s"] = {"total": time.perf_counter() - t1}
    log.info("seed %d margin %+.4f (%.0fs)", seed, out["margin"], out["timing_s"]["total"])
    return out


def reported_numbers(result: dict) -> dict:
    """Everything in a seed result except wall-clock timings."""

    def strip(v):
        if isinstance(v, dict):
            return {k: strip(x) for k, x in v.items() if k not in ("timing_s", "compare_time_s", "wall_time_s")}
        if isinstance(v, list):
            return [strip(x) for x in v]
        return v

    return strip(result)


__all__ = [
    "TrainedMetanet",
    "baseline_curve",
    "compare_on_probe",
    "prepare_bundles",
    "probe_epochs",
    "reported_numbers",
    "run_seed",
    "seeded_config",
    "train_metanet",
]
