"""Experiment configuration and the end-to-end pruning pipeline.

Stages: data -> base training + optional initial prune/finetune ->
[metanetwork -> finetune] -> prune to the final speed-up -> finetune.
Baseline mode skips the bracketed stage and gives its finetune epochs to the
last stage so both modes spend the same number of finetune epochs.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .. import tensorcore as tc
from .checkpoint import load_checkpoint, save_checkpoint
from .curves import acc_vs_speedup_curve, curve_dicts, curve_to_csv
from .data import Dataset, as_tokens, train_test
from ..metanet import Metanetwork
from ..metatrain import DataModelBundle, MetaTrainConfig, apply_metanetwork, prepare_data_model
from ..netmodel import NetworkSpec, TrainConfig, build_architecture, count_costs, evaluate_accuracy, train
from ..pruner import CriterionConfig, apply_prune, build_pruning_groups, plan_prune


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class DatasetConfig:
    kind: str = "shapes8x8"
    seed: int = 0
    train_size: int = 5000
    test_size: int = 1000
    classes: int = 10
    dims: int = 2
    extra: dict = field(default_factory=dict)

    def load(self) -> tuple[Dataset, Dataset]:
        return train_test(self.kind, self.seed, self.train_size, self.test_size, self.classes, self.dims, **self.extra)


@dataclass
class ArchConfig:
    name: str = "tiny_resnet"
    attrs: dict = field(default_factory=lambda: {"n": 2, "widths": [24, 48]})

    def build(self, seed: int = 0):
        return build_architecture(self.name, seed, **self.attrs)


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=12, lr=0.1, milestones=(8,)))
    initial_finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=3, lr=0.01))
    # short, gentle finetunes: the desk task recovers fully from a 2x prune
    # under a few epochs at lr 0.01, which hides any difference in prunability
    metanet_finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=1, lr=0.002))
    final_finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=1, lr=0.002))
    criterion: CriterionConfig = field(default_factory=CriterionConfig)
    metanet: dict = field(
        default_factory=lambda: {"num_layers": 4, "hidden_dim": 32, "node_res_ratio": 0.01, "edge_res_ratio": 0.1}
    )
    metatrain: MetaTrainConfig = field(
        default_factory=lambda: MetaTrainConfig(epochs=20, lr=3e-4, pruner_reg=0.003, steps_per_model=10)
    )
    initial_speed_up: float = 1.0
    final_speed_up: float = 2.0
    train_seeds: tuple[int, ...] = (0, 1)
    probe_seed: int = 2
    curve_step_fraction: float = 0.05
    curve_max_speed_up: float = 4.0
    # checkpoint selection target and turning-point threshold, as accuracy
    # drops below the probe's unpruned accuracy
    selection_drop: float = 0.01
    turning_drop: float = 0.02
    out_dir: str | None = None

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=list))


_NESTED = {
    "dataset": DatasetConfig,
    "arch": ArchConfig,
    "train": TrainConfig,
    "initial_finetune": TrainConfig,
    "metanet_finetune": TrainConfig,
    "final_finetune": TrainConfig,
    "criterion": CriterionConfig,
    "metatrain": MetaTrainConfig,
}


def config_from_dict(d: dict) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kw: dict[str, Any] = {}
    for k, v in d.items():
        cls = _NESTED.get(k)
        if cls is not None and isinstance(v, dict):
            allowed = {f.name for f in fields(cls)}
            bad = set(v) - allowed
            if bad:
                raise ValueError(f"unknown keys in {k!r}: {sorted(bad)}")
            kw[k] = cls(**v)
        elif k == "train_seeds":
            kw[k] = tuple(v)
        else:
            kw[k] = v
    return ExperimentConfig(**kw)


def load_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    d: dict = {}
    if path:
        text = Path(path).read_text(encoding="utf-8")
        d = (json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)) or {}
    for k, v in (overrides or {}).items():
        d[k] = v
    return config_from_dict(d)


# ------------------------------------------------------------------ stages


def load_data(cfg: ExperimentConfig, spec: NetworkSpec | None = None) -> tuple[Dataset, Dataset]:
    tr, te = cfg.dataset.load()
    if spec is not None and spec.has_attention:
        tr, te = as_tokens(tr), as_tokens(te)
    return tr, te


def make_bundle(cfg: ExperimentConfig, seed: int, role: str, data=None, arch: ArchConfig | None = None) -> DataModelBundle:
    spec, _ = (arch or cfg.arch).build(seed)
    tr, te = data or load_data(cfg, spec)
    return prepare_data_model(spec, tr, te, cfg.train, cfg.initial_speed_up, cfg.initial_finetune, cfg.criterion, seed, role)


def _stage(report: dict, name: str, spec: NetworkSpec, params, test: Dataset, origin_flops: int, **extra):
    costs = count_costs(spec)
    rec = {
        "stage": name,
        "acc": evaluate_accuracy(spec, params, test),
        "flops": costs.flops,
        "params": costs.params,
        "speed_up": origin_flops / costs.flops,
        **extra,
    }
    report["stages"].append(rec)
    return rec


def run_pipeline(
    cfg: ExperimentConfig,
    metanet: Metanetwork | str | None = None,
    bundle: DataModelBundle | None = None,
    data: tuple[Dataset, Dataset] | None = None,
    mode: str | None = None,
    curves: bool = True,
) -> dict:
    """Run the pruning pipeline on one network; ``mode`` is 'metanet' or 'baseline'."""
    mode = mode or ("baseline" if metanet is None else "metanet")
    if mode not in ("metanet", "baseline"):
        raise ValueError(f"unknown pipeline mode {mode!r}")
    if mode == "metanet" and metanet is None:
        raise StageError("metanetwork", ValueError("metanet mode needs a metanetwork checkpoint"))
    tc.configure_threads()
    t0 = time.perf_counter()
    report: dict = {"mode": mode, "stages": [], "config": cfg.to_dict()}

    def guarded(name, fn):
        try:
            return fn()
        except StageError:
            raise
        except Exception as e:  # noqa: BLE001 - rewrapped with the stage name
            raise StageError(name, e) from e

    origin_spec, _ = cfg.arch.build(cfg.probe_seed)
    origin_flops = count_costs(origin_spec).flops
    tr, te = data or guarded("data", lambda: load_data(cfg, origin_spec))
    if bundle is None:
        bundle = guarded("initial", lambda: make_bundle(cfg, cfg.probe_seed, "eval", (tr, te)))
    spec, params = bundle.spec, bundle.params
    _stage(report, "initial", spec, params, te, origin_flops)

    ft_before = cfg.metanet_finetune
    if mode == "metanet":
        net = guarded("metanetwork", lambda: metanet if isinstance(metanet, Metanetwork) else load_checkpoint(metanet))
        params = guarded("metanetwork", lambda: apply_metanetwork(net, bundle))
        _stage(report, "metanetwork", spec, params, te, origin_flops)
        params, _ = guarded("metanetwork_finetune", lambda: train(spec, params, tr, _seeded(ft_before, cfg.probe_seed + 11)))
        _stage(report, "metanetwork_finetune", spec, params, te, origin_flops)
        if curves:
            report["curve_before_prune"] = curve_dicts(
                acc_vs_speedup_curve(spec, params, te, cfg.criterion, cfg.curve_step_fraction, cfg.curve_max_speed_up)
            )
    elif curves:
        report["curve_before_prune"] = curve_dicts(
            acc_vs_speedup_curve(spec, params, te, cfg.criterion, cfg.curve_step_fraction, cfg.curve_max_speed_up)
        )

    bundle_flops = count_costs(spec).flops
    stage_target = max(1.0, cfg.final_speed_up * bundle_flops / origin_flops)

    def prune():
        gi = build_pruning_groups(spec)
        plan = plan_prune(spec, params, gi, cfg.criterion, stage_target)
        return plan, *apply_prune(spec, params, plan, gi)

    plan, spec, params = guarded("prune", prune)
    _stage(report, "prune", spec, params, te, origin_flops, removed_dims=len(plan.removals))

    final_ft = cfg.final_finetune
    if mode == "baseline":
        final_ft = TrainConfig(**{**asdict(final_ft), "epochs": final_ft.epochs + ft_before.epochs})
    params, _ = guarded("finetune", lambda: train(spec, params, tr, _seeded(final_ft, cfg.probe_seed + 12)))
    final = _stage(report, "finetune", spec, params, te, origin_flops)
    report["final_acc"] = final["acc"]
    report["final_speed_up"] = final["speed_up"]
    report["finetune_epochs"] = final_ft.epochs + (ft_before.epochs if mode == "metanet" else 0)
    report["wall_time_s"] = time.perf_counter() - t0
    report["final_spec"] = spec.to_dict()
    if cfg.out_dir:
        out = Path(cfg.out_dir) / mode
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(DataModelBundle(spec, params, {"pipeline": mode}, "eval"), out / "pruned")
        (out / "plan.json").write_text(plan.to_text())
        if "curve_before_prune" in report:
            from .curves import CurveRecord

            (out / "curve_before_prune.csv").write_text(
                curve_to_csv([CurveRecord(**r) for r in report["curve_before_prune"]])
            )
        (out / "report.json").write_text(json.dumps(report, indent=1))
    return report


def _seeded(cfg: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(**{**asdict(cfg), "seed": seed})


def report_summary(report: dict) -> str:
    lines = [f"mode: {report['mode']}"]
    for s in report["stages"]:
        lines.append(f"  {s['stage']:<22} acc={s['acc']:.4f} flops={s['flops']} params={s['params']} speed_up={s['speed_up']:.3f}")
    lines.append(f"  final acc={report['final_acc']:.4f} speed_up={report['final_speed_up']:.3f} wall={report['wall_time_s']:.1f}s")
    return "\n".join(lines)
