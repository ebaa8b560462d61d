"""Accuracy-vs-speed-up sweeps (prune a little, evaluate, repeat; no finetuning)."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

from .data import Dataset
from ..netmodel import NetworkSpec, ParamStore, count_costs, evaluate_accuracy
from ..pruner import (
    CriterionConfig,
    apply_prune,
    build_pruning_groups,
    plan_prune_count,
    pruned_fraction,
    speed_up,
)

CSV_HEADER = ("speedup", "pruned_flops_frac", "params", "acc")


@dataclass(frozen=True)
class CurveRecord:
    speed_up: float
    pruned_flops_frac: float
    params: int
    acc: float


def acc_vs_speedup_curve(
    spec: NetworkSpec,
    params: ParamStore,
    dataset: Dataset,
    criterion: CriterionConfig | None = None,
    step_fraction: float = 0.05,
    max_speed_up: float = 4.0,
) -> list[CurveRecord]:
    """Each step removes about ``step_fraction`` of the remaining prunable dims, scores recomputed."""
    if not 0 < step_fraction <= 0.5:
        raise ValueError("step_fraction must lie in (0, 0.5]")
    if max_speed_up <= 1:
        raise ValueError("max_speed_up must exceed 1")
    criterion = criterion or CriterionConfig()
    origin = count_costs(spec).flops
    records = [CurveRecord(1.0, 0.0, count_costs(spec).params, evaluate_accuracy(spec, params, dataset))]
    while records[-1].speed_up < max_speed_up:
        gi = build_pruning_groups(spec)
        remaining = sum(g.size for g in gi.groups if g.prunable)
        plan = plan_prune_count(spec, params, gi, criterion, max(1, round(step_fraction * remaining)))
        if not plan.removals:
            break
        spec, params = apply_prune(spec, params, plan, gi)
        costs = count_costs(spec)
        records.append(
            CurveRecord(
                speed_up(origin, costs.flops),
                pruned_fraction(origin, costs.flops),
                costs.params,
                evaluate_accuracy(spec, params, dataset),
            )
        )
    return records


def flat_region_accuracy(curve: list[CurveRecord]) -> float:
    return max(r.acc for r in curve)


def turning_point(curve: list[CurveRecord], threshold: float) -> float:
    """Largest speed-up whose accuracy is still >= threshold (1.0 if none)."""
    ok = [r.speed_up for r in curve if r.acc >= threshold]
    return max(ok) if ok else 1.0


def curve_to_csv(curve: list[CurveRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in curve:
        w.writerow([f"{r.speed_up:.6g}", f"{r.pruned_flops_frac:.6g}", f"{r.params:d}", f"{r.acc:.6g}"])
    return buf.getvalue()


def curve_from_csv(text: str) -> list[CurveRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"curve CSV must start with header {','.join(CSV_HEADER)}")
    return [CurveRecord(float(a), float(b), int(c), float(d)) for a, b, c, d in rows[1:]]


def curve_dicts(curve: list[CurveRecord]) -> list[dict]:
    return [asdict(r) for r in curve]
