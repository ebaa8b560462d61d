"""Data-model preparation and metanetwork training.

One meta step: encode a data model as a graph, run the metanetwork, decode a
new network, and backpropagate two gradient signals into the metanetwork:
cross-entropy on training minibatches (accumulated over ``iters`` batches)
plus ``pruner_reg`` times the sparsity-criterion gradient of the decoded
weights.  Both are injected at the decoded tensors and pushed back through
the codec and metanetwork with a single backward call.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import torch

from . import tensorcore as tc
from .workbench.checkpoint import load_checkpoint, save_checkpoint
from .workbench.curves import CurveRecord, acc_vs_speedup_curve, flat_region_accuracy, turning_point
from .workbench.data import Dataset
from .graphcodec import network_to_graph, graph_to_network
from .metanet import Metanetwork, metanet_apply
from .netmodel import (
    NetworkSpec,
    ParamStore,
    TrainConfig,
    evaluate_accuracy,
    forward_logits,
    init_params,
    is_buffer,
    train,
)
from .pruner import (
    CriterionConfig,
    GroupIndex,
    apply_prune,
    build_pruning_groups,
    plan_prune,
    sparsity_gradients,
    sparsity_objective,
)

log = logging.getLogger(__name__)


class MetaTrainingDiverged(RuntimeError):
    pass


@dataclass
class DataModelBundle:
    spec: NetworkSpec
    params: ParamStore
    provenance: dict = field(default_factory=dict)
    role: str = "train"


@dataclass
class MetaTrainConfig:
    epochs: int = 40
    lr: float = 1e-3
    milestones: tuple[int, ...] = ()
    weight_decay: float = 5e-4
    pruner_reg: float = 10.0
    batch_size: int = 128
    iters: int = 1  # big batch = batch_size * iters
    steps_per_model: int = 1
    full_dataset: bool = False  # accuracy loss over the whole training set instead of a big batch
    dataset_fraction: float = 1.0
    # "running": normalize with the bundle's frozen running statistics;
    # "batch": batch statistics, running statistics left untouched
    bn_mode: str = "running"
    criterion: CriterionConfig = field(default_factory=CriterionConfig)
    seed: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        if isinstance(self.criterion, dict):
            self.criterion = CriterionConfig(**self.criterion)
        if self.pruner_reg < 0:
            raise ValueError("pruner_reg must be >= 0")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.bn_mode not in ("running", "batch"):
            raise ValueError(f"bn_mode must be 'running' or 'batch', got {self.bn_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


# ------------------------------------------------------------ data models


def prepare_data_model(
    spec: NetworkSpec,
    train_set: Dataset,
    test_set: Dataset | None,
    schedule: TrainConfig,
    initial_speed_up: float = 1.0,
    finetune: TrainConfig | None = None,
    criterion: CriterionConfig | None = None,
    seed: int = 0,
    role: str = "train",
) -> DataModelBundle:
    """Train from scratch, optionally prune lightly and finetune."""
    if initial_speed_up < 1:
        raise ValueError("initial_speed_up must be >= 1")
    criterion = criterion or CriterionConfig()
    params = init_params(spec, seed)
    params, hist = train(spec, params, train_set, TrainConfig(**{**asdict(schedule), "seed": seed}))
    prov = {
        "dataset": train_set.provenance,
        "schedule": asdict(schedule),
        "initial_speed_up": initial_speed_up,
        "seed": seed,
        "arch": spec.arch,
    }
    if test_set is not None:
        prov["trained_acc"] = evaluate_accuracy(spec, params, test_set)
    if initial_speed_up > 1:
        plan = plan_prune(spec, params, None, criterion, initial_speed_up)
        spec, params = apply_prune(spec, params, plan)
        prov["achieved_initial_speed_up"] = plan.speed_up
        ft = finetune or schedule
        params, _ = train(spec, params, train_set, TrainConfig(**{**asdict(ft), "seed": seed + 1}))
        prov["finetune"] = asdict(ft)
    if test_set is not None:
        prov["acc"] = evaluate_accuracy(spec, params, test_set)
    return DataModelBundle(spec, params, prov, role)


# --------------------------------------------------------------- meta step


def apply_metanetwork(net: Metanetwork, bundle: DataModelBundle) -> ParamStore:
    """Network -> graph -> metanetwork -> network, running stats kept from the bundle."""
    g = network_to_graph(bundle.spec, bundle.params)
    with torch.no_grad():
        out = metanet_apply(net, g)
        new = graph_to_network(out, bundle.spec, reference=bundle.params)
    return {k: v.detach().clone() for k, v in new.items()}


def _batches(dataset: Dataset, cfg: MetaTrainConfig, gen: torch.Generator) -> list[torch.Tensor]:
    n = len(dataset)
    if cfg.full_dataset:
        return [torch.arange(i, min(i + cfg.batch_size, n)) for i in range(0, n, cfg.batch_size)]
    return [torch.randint(0, n, (min(cfg.batch_size, n),), generator=gen) for _ in range(cfg.iters)]


def meta_gradients(
    net: Metanetwork,
    bundle: DataModelBundle,
    dataset: Dataset,
    batches: list[torch.Tensor],
    cfg: MetaTrainConfig,
    groups: GroupIndex | None = None,
) -> tuple[dict[str, torch.Tensor], dict]:
    """Gradients w.r.t. metanetwork parameters plus loss terms (no update applied)."""
    spec = bundle.spec
    graph = network_to_graph(spec, bundle.params)
    out = metanet_apply(net, graph)
    decoded = graph_to_network(out, spec, reference=bundle.params)
    names = [k for k in decoded if not is_buffer(k)]
    leaves = {k: decoded[k].detach().requires_grad_(True) for k in names}
    full = {**{k: v for k, v in bundle.params.items() if is_buffer(k)}, **leaves}
    acc_grad = {k: torch.zeros_like(v) for k, v in leaves.items()}
    total_n = sum(len(b) for b in batches)
    acc_loss = 0.0
    for idx in batches:
        logits = forward_logits(spec, full, dataset.x[idx], train=cfg.bn_mode == "batch", update_stats=False)
        loss = tc.softmax_cross_entropy(logits, dataset.y[idx]) * (len(idx) / total_n)
        if not torch.isfinite(loss):
            raise MetaTrainingDiverged(f"non-finite accuracy loss on {spec.arch} ({float(loss)})")
        for k, g in tc.gradients(loss, leaves).items():
            acc_grad[k] += g
        acc_loss += float(loss.detach())
    gi = groups or build_pruning_groups(spec)
    plain = {k: v.detach() for k, v in full.items()}
    sp = sparsity_objective(plain, gi, cfg.criterion)
    if not math.isfinite(sp):
        raise MetaTrainingDiverged(f"non-finite sparsity loss on {spec.arch}")
    grads = dict(acc_grad)
    if cfg.pruner_reg:
        for k, g in sparsity_gradients(plain, gi, cfg.criterion).items():
            grads[k] = grads[k] + cfg.pruner_reg * g
    targets = [decoded[k] for k in names if decoded[k].requires_grad]
    tgrads = [grads[k] for k in names if decoded[k].requires_grad]
    mparams = dict(net.named_parameters())
    meta = torch.autograd.grad(targets, list(mparams.values()), tgrads, allow_unused=True)
    meta_grads = {k: (g if g is not None else torch.zeros_like(p)) for (k, p), g in zip(mparams.items(), meta)}
    return meta_grads, {"acc_loss": acc_loss, "sparsity_loss": sp}


def meta_step(
    net: Metanetwork,
    bundle: DataModelBundle,
    dataset: Dataset,
    cfg: MetaTrainConfig,
    state: tc.OptimState,
    gen: torch.Generator,
    groups: GroupIndex | None = None,
) -> dict:
    batches = _batches(dataset, cfg, gen)
    grads, terms = meta_gradients(net, bundle, dataset, batches, cfg, groups)
    bad = [k for k, g in grads.items() if not torch.isfinite(g).all()]
    if bad:
        raise MetaTrainingDiverged(f"non-finite meta-gradient in {bad[:3]} (loss terms {terms})")
    params = dict(net.named_parameters())
    tc.adamw_step(state, {k: p.data for k, p in params.items()}, grads)
    return terms


# -------------------------------------------------------------- meta train


@dataclass
class MetaTrainResult:
    states: list[dict[str, torch.Tensor]]  # one metanetwork state per epoch
    history: list[dict]
    checkpoint_paths: list[str]


def meta_train(
    cfg: MetaTrainConfig, net: Metanetwork, bundles: list[DataModelBundle], dataset: Dataset
) -> MetaTrainResult:
    """Train ``net`` in place; each epoch visits every train bundle and persists a snapshot."""
    train_bundles = [b for b in bundles if b.role == "train"]
    if not train_bundles:
        raise ValueError("meta_train needs at least one train-role bundle")
    tc.configure_threads()
    if cfg.dataset_fraction < 1:
        dataset = dataset.subset(cfg.dataset_fraction, cfg.seed)
    sched = tc.LrSchedule(cfg.lr, cfg.milestones, 0.1)
    state = tc.adamw_state(cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    groups = [build_pruning_groups(b.spec) for b in train_bundles]
    out_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    states, history, paths = [], [], []
    for epoch in range(cfg.epochs):
        state.lr = tc.lr_at_epoch(sched, epoch)
        terms = []
        for b, gi in zip(train_bundles, groups):
            for _ in range(cfg.steps_per_model):
                terms.append(meta_step(net, b, dataset, cfg, state, gen, gi))
        rec = {
            "epoch": epoch + 1,
            "lr": state.lr,
            "acc_loss": sum(t["acc_loss"] for t in terms) / len(terms),
            "sparsity_loss": sum(t["sparsity_loss"] for t in terms) / len(terms),
        }
        history.append(rec)
        log.info("meta epoch %d %s", epoch + 1, rec)
        states.append({k: v.detach().clone() for k, v in net.state_dict().items()})
        if out_dir is not None:
            paths.append(str(save_checkpoint(net, out_dir / f"meta_epoch_{epoch + 1}")))
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = {"config": cfg.to_dict(), "metanet": net.cfg.to_dict(), "epochs": history, "checkpoints": paths}
        (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=1))
    return MetaTrainResult(states, history, paths)


# --------------------------------------------------------------- selection


@dataclass
class Selection:
    epoch: int  # index into the checkpoint series
    curves: dict[int, list[CurveRecord]]
    flat_acc: dict[int, float]
    met_target: bool


def binary_search_epochs(n: int, evaluate: Callable[[int], list[CurveRecord]], target_acc: float) -> Selection:
    """Latest epoch whose flat-region accuracy reaches ``target_acc``, found by bisection.

    Assumes quality degrades monotonically with epoch once the target is
    missed; falls back to the best probed epoch with ``met_target=False``.
    """
    if n < 1:
        raise ValueError("no checkpoints to select from")
    curves, flat = {}, {}
    lo, hi, best = 0, n - 1, None
    while lo <= hi:
        mid = (lo + hi) // 2
        curves[mid] = evaluate(mid)
        flat[mid] = flat_region_accuracy(curves[mid])
        if flat[mid] >= target_acc:
            best, lo = mid, mid + 1
        else:
            hi = mid - 1
    if best is None:
        best = max(flat, key=lambda e: (flat[e], e))
        return Selection(best, curves, flat, False)
    return Selection(best, curves, flat, True)


def finetune_and_curve(
    net_state_loader: Callable[[int], Metanetwork],
    probe: DataModelBundle,
    train_set: Dataset,
    test_set: Dataset,
    finetune: TrainConfig,
    criterion: CriterionConfig,
    step_fraction: float = 0.05,
    max_speed_up: float = 4.0,
) -> Callable[[int], list[CurveRecord]]:
    def evaluate(epoch: int) -> list[CurveRecord]:
        params = apply_metanetwork(net_state_loader(epoch), probe)
        params, _ = train(probe.spec, params, train_set, finetune)
        return acc_vs_speedup_curve(probe.spec, params, test_set, criterion, step_fraction, max_speed_up)

    return evaluate


def select_metanetwork(
    checkpoints: list[str] | list[Metanetwork],
    probe: DataModelBundle,
    train_set: Dataset,
    test_set: Dataset,
    target_acc: float,
    finetune: TrainConfig,
    criterion: CriterionConfig | None = None,
    step_fraction: float = 0.05,
    max_speed_up: float = 4.0,
) -> Selection:
    def load(i: int) -> Metanetwork:
        c = checkpoints[i]
        return c if isinstance(c, Metanetwork) else load_checkpoint(c)

    evaluate = finetune_and_curve(
        load, probe, train_set, test_set, finetune, criterion or CriterionConfig(), step_fraction, max_speed_up
    )
    sel = binary_search_epochs(len(checkpoints), evaluate, target_acc)
    if not sel.met_target:
        log.warning("no checkpoint reached flat-region accuracy %.4f; best effort epoch %d", target_acc, sel.epoch)
    return sel


__all__ = [
    "DataModelBundle",
    "MetaTrainConfig",
    "MetaTrainResult",
    "MetaTrainingDiverged",
    "Selection",
    "apply_metanetwork",
    "binary_search_epochs",
    "meta_gradients",
    "meta_step",
    "meta_train",
    "prepare_data_model",
    "select_metanetwork",
    "turning_point",
]
