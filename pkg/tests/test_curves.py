import pytest

from metaprune.workbench.curves import (
    CurveRecord,
    acc_vs_speedup_curve,
    curve_from_csv,
    curve_to_csv,
    flat_region_accuracy,
    turning_point,
)
from metaprune.workbench.data import train_test
import torch

from metaprune.netmodel import build_architecture, init_params, tiny_mlp


def test_curve_is_monotone_in_speed_up_and_reaches_target():
    spec, params = build_architecture("tiny_vgg", 0, widths=(8, 16))
    _, te = train_test("shapes8x8", 0, 10, 100, 10)
    curve = acc_vs_speedup_curve(spec, params, te, step_fraction=0.1, max_speed_up=3.0)
    speeds = [r.speed_up for r in curve]
    assert speeds[0] == 1.0 and curve[0].pruned_flops_frac == 0.0
    assert all(b > a for a, b in zip(speeds, speeds[1:]))
    assert speeds[-1] >= 3.0
    assert all(abs(r.pruned_flops_frac - (1 - 1 / r.speed_up)) < 1e-12 for r in curve)
    assert all(b.params < a.params for a, b in zip(curve, curve[1:]))


def test_curve_rejects_bad_steps():
    spec, params = build_architecture("tiny_vgg", 0)
    _, te = train_test("shapes8x8", 0, 10, 20, 10)
    with pytest.raises(ValueError):
        acc_vs_speedup_curve(spec, params, te, step_fraction=0.9)
    with pytest.raises(ValueError):
        acc_vs_speedup_curve(spec, params, te, max_speed_up=1.0)


def test_turning_point_and_flat_region():
    curve = [CurveRecord(1.0, 0, 10, 0.9), CurveRecord(1.5, 1 / 3, 8, 0.88), CurveRecord(2.0, 0.5, 6, 0.7)]
    assert flat_region_accuracy(curve) == 0.9
    assert turning_point(curve, 0.85) == 1.5
    assert turning_point(curve, 0.95) == 1.0


def test_csv_round_trip_and_header():
    curve = [CurveRecord(1.0, 0.0, 10, 0.9), CurveRecord(2.5, 0.6, 4, 0.25)]
    text = curve_to_csv(curve)
    assert text.splitlines()[0] == "speedup,pruned_flops_frac,params,acc"
    assert curve_from_csv(text) == curve
    with pytest.raises(ValueError, match="header"):
        curve_from_csv("a,b\n1,2\n")


def test_duplicated_units_prune_for_free():
    # units 2 and 3 duplicate units 0 and 1 and carry tiny outgoing weights
    spec = tiny_mlp(2, 4, 2)
    params = init_params(spec, 0)
    w1 = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    params["fc1.weight"], params["fc1.bias"] = w1, torch.zeros(4)
    params["fc_out.weight"] = torch.tensor([[2.0, -2.0, 0.05, -0.05], [-2.0, 2.0, -0.05, 0.05]])
    _, te = train_test("blobs", 0, 10, 200, 2)
    full = acc_vs_speedup_curve(spec, params, te, step_fraction=0.25, max_speed_up=1.2)
    assert full[1].acc == full[0].acc and full[1].speed_up > 1
