import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from metaprune.netmodel import build_architecture, count_costs, forward_logits, init_params, tiny_mlp
from metaprune.pruner import (
    CriterionConfig,
    Member,
    PruneError,
    PrunePlan,
    PruningGroup,
    apply_prune,
    build_pruning_groups,
    importance_scores,
    mask_dims,
    max_speed_up,
    nm_mask,
    nm_prune,
    plan_prune,
    raw_importance,
    shrinkage_weights,
    sparsity_gradients,
    sparsity_objective,
    speed_up,
    speed_up_from_fraction,
    unstructured_prune,
)

from . import oracles
from .checks import brute_force_comparison, prune_equivalence_error, residual_group_toy


def _group(*tensors):
    params = {f"w{i}": torch.tensor(t, dtype=torch.float64) for i, t in enumerate(tensors)}
    size = len(tensors[0])
    return params, PruningGroup(0, size, [Member(f"w{i}", 0, 0, True) for i in range(len(tensors))], True)


def test_hand_scores_mean_and_first():
    params, g = _group([1.0, 2.0], [3.0, 4.0])
    assert raw_importance(params, g, CriterionConfig()).tolist() == [5.0, 10.0]
    assert importance_scores(params, g, CriterionConfig()).tolist() == [0.5, 1.0]
    assert raw_importance(params, g, CriterionConfig(reduce="FIRST")).tolist() == [1.0, 4.0]
    same, g2 = _group([2.0, 2.0, 2.0])
    assert importance_scores(same, g2, CriterionConfig()).tolist() == [1.0, 1.0, 1.0]


def test_all_zero_group_scores_zero():
    params, g = _group([0.0, 0.0])
    for norm in ("MEAN", "MAX", "NONE"):
        assert importance_scores(params, g, CriterionConfig(normalize=norm)).tolist() == [0.0, 0.0]


def test_shrinkage_endpoints_and_hand_example():
    gamma = shrinkage_weights(torch.tensor([1.0, 4.0, 9.0]), 4)
    assert gamma.tolist() == [16.0, 4.0, 1.0]
    assert shrinkage_weights(torch.tensor([3.0, 3.0]), 4).tolist() == [1.0, 1.0]
    g = shrinkage_weights(torch.rand(20, dtype=torch.float64) + 0.1, 5)
    assert g.max().item() == 32.0 and g.min().item() == 1.0


def test_sparsity_gradient_hand_example():
    params, g = _group([3.0])
    crit = CriterionConfig(p=2, reduce="MEAN", normalize="NONE", shrink_alpha=0)
    assert sparsity_gradients(params, [g], crit)["w0"].tolist() == [6.0]


def test_sparsity_gradient_equals_autograd_with_frozen_scales():
    spec, params = build_architecture("tiny_resnet", 0, n=2, widths=(4, 8))
    params = {k: v.double() for k, v in params.items()}
    gi = build_pruning_groups(spec)
    crit = CriterionConfig(p=1.5)
    leaves = {k: v.clone().requires_grad_(True) for k, v in params.items()}
    total = 0
    for g in gi.groups:
        if not g.prunable:
            continue
        I = raw_importance(params, g, crit)
        scale = shrinkage_weights(I, crit.shrink_alpha) / I.max()
        scored = [m for m in g.members if m.scored]
        per = torch.stack([leaves[m.param].narrow(m.axis, m.offset, g.size).movedim(m.axis, 0).reshape(g.size, -1).abs().pow(1.5).sum(1) for m in scored])
        total = total + (scale * per.mean(0)).sum()
    total.backward()
    ours = sparsity_gradients(params, gi, crit)
    for k, v in ours.items():
        assert torch.allclose(v, leaves[k].grad, atol=1e-12)
    assert math.isclose(sparsity_objective(params, gi, crit), float(total.detach()), rel_tol=1e-12)


def test_sparsity_step_shrinks_every_nonzero_weight():
    spec, params = build_architecture("tiny_vgg", 3, widths=(4, 8))
    gi = build_pruning_groups(spec)
    grads = sparsity_gradients(params, gi, CriterionConfig())
    for k, g in grads.items():
        w = params[k]
        stepped = w - 1e-4 * g
        touched = g != 0
        assert touched.any()
        assert torch.all(stepped.abs()[touched] < w.abs()[touched])


def test_speed_up_arithmetic():
    assert speed_up_from_fraction(0.656) == pytest.approx(2.91, abs=0.005)
    assert speed_up_from_fraction(0.611) == pytest.approx(2.57, abs=0.005)
    assert speed_up(100, 100) == 1.0 and speed_up(100, 50) == 2.0
    with pytest.raises(ValueError):
        speed_up(100, 0)


# --------------------------------------------------------------- groups


def test_mlp_has_one_group_per_hidden_layer_and_it_is_functional():
    spec = tiny_mlp(4, 3, 2)
    params = init_params(spec, 0)
    params["fc1.bias"] = params["fc1.bias"].abs() + 0.5
    gi = build_pruning_groups(spec)
    prunable = [g for g in gi.groups if g.prunable]
    assert len(prunable) == 1 and prunable[0].size == 3
    assert {(m.param, m.axis) for m in prunable[0].members} == {("fc1.weight", 0), ("fc1.bias", 0), ("fc_out.weight", 1)}
    x = torch.randn(6, 4)
    base = forward_logits(spec, params, x)
    for k in range(3):
        # zero only the row: the unit still emits relu(bias) unless its column is zeroed too
        row_only = {n: v.clone() for n, v in params.items()}
        row_only["fc1.weight"][k] = 0
        both = mask_dims(params, gi, PrunePlan(spec.fingerprint(), [(prunable[0].gid, k, 0.0)], 0, 0, 0))
        pruned = {n: v.clone() for n, v in params.items()}
        pruned["fc_out.weight"][:, k] = 0
        pruned["fc1.weight"][k] = 0
        pruned["fc1.bias"][k] = 0
        assert torch.equal(forward_logits(spec, both, x), forward_logits(spec, pruned, x))
        assert not torch.allclose(forward_logits(spec, row_only, x), forward_logits(spec, pruned, x))
        assert not torch.allclose(base, forward_logits(spec, pruned, x))


def test_residual_chain_is_a_single_group():
    spec = residual_group_toy()
    gi = build_pruning_groups(spec)
    chain = [g for g in gi.groups if ("stem.weight", 0) in {(m.param, m.axis) for m in g.members}]
    assert len(chain) == 1
    pairs = {(m.param, m.axis) for m in chain[0].members}
    assert {("c2.weight", 0), ("bn2.weight", 0), ("c1.weight", 1), ("fc.weight", 1), ("bn0.weight", 0)} <= pairs
    assert sum(g.prunable for g in gi.groups) == 2


def test_resnet_stage_groups_include_downsample():
    spec, _ = build_architecture("tiny_resnet", 0, n=4, widths=(8, 16))
    gi = build_pruning_groups(spec)
    stage2 = [g for g in gi.groups if ("block2.down.weight", 0) in {(m.param, m.axis) for m in g.members}][0]
    pairs = {(m.param, m.axis) for m in stage2.members}
    assert {("block2.conv2.weight", 0), ("block3.conv2.weight", 0), ("block2.downbn.weight", 0), ("fc.weight", 1)} <= pairs
    assert ("block2.conv1.weight", 0) not in pairs


@pytest.mark.parametrize("name,attrs", [("tiny_mlp", {"depth": 2}), ("tiny_vgg", {}), ("tiny_resnet", {"n": 4}), ("tiny_attn", {})])
def test_groups_partition_parameter_slices(name, attrs):
    spec, params = build_architecture(name, 0, **attrs)
    gi = build_pruning_groups(spec)
    seen: dict[tuple[str, int, int], int] = {}
    for g in gi.groups:
        for m in g.members:
            for k in range(g.size):
                key = (m.param, m.axis, m.offset + k)
                assert key not in seen
                seen[key] = g.gid
    for (p, axis, i) in seen:
        assert i < params[p].shape[axis]
    # every leading axis of every tensor is covered
    for p, t in params.items():
        assert all((p, 0, i) in seen for i in range(t.shape[0])), p


def test_attention_heads_are_separate_groups():
    spec, _ = build_architecture("tiny_attn", 0, heads=3, head_dim=2)
    gi = build_pruning_groups(spec)
    assert len(gi.heads["attn"]) == 3
    assert all(gi.groups[h].size == 2 and gi.groups[h].prunable for h in gi.heads["attn"])


# ------------------------------------------------------------- planning


def test_target_one_is_empty_and_unreachable_raises():
    spec, params = build_architecture("tiny_vgg", 0)
    gi = build_pruning_groups(spec)
    plan = plan_prune(spec, params, gi, CriterionConfig(), 1.0)
    assert plan.removals == [] and plan.speed_up == 1.0
    new_spec, new_params = apply_prune(spec, params, plan, gi)
    assert new_spec == spec and all(torch.equal(new_params[k], params[k]) for k in params)
    with pytest.raises(PruneError, match="max achievable"):
        plan_prune(spec, params, gi, CriterionConfig(), max_speed_up(gi) * 1.01)


def test_plan_removes_smallest_unit_by_exhaustive_enumeration():
    spec = tiny_mlp(3, 4, 2)
    params = init_params(spec, 1)
    with torch.no_grad():
        params["fc1.weight"][2] *= 0.01
        params["fc_out.weight"][:, 2] *= 0.01
    gi = build_pruning_groups(spec)
    g = [g for g in gi.groups if g.prunable][0]
    plan = plan_prune(spec, params, gi, CriterionConfig(), 1.01)
    assert [(gid, k) for gid, k, _ in plan.removals] == [(g.gid, 2)]
    # enumerate every single-unit removal and its group-norm loss
    losses = []
    for k in range(4):
        losses.append(float(params["fc1.weight"][k].pow(2).sum() + params["fc_out.weight"][:, k].pow(2).sum()))
    assert int(np.argmin(losses)) == 2


@pytest.mark.parametrize("name,attrs", [("tiny_mlp", {"depth": 2, "hidden": 8}), ("tiny_vgg", {}), ("tiny_resnet", {"n": 4}), ("tiny_attn", {})])
@pytest.mark.parametrize("target", [1.3, 2.0])
def test_plan_bounds_and_cost_bookkeeping(name, attrs, target):
    spec, params = build_architecture(name, 0, **attrs)
    gi = build_pruning_groups(spec)
    plan = plan_prune(spec, params, gi, CriterionConfig(), target)
    assert plan.speed_up >= target
    new_spec, new_params = apply_prune(spec, params, plan, gi)
    costs = count_costs(new_spec, new_params)
    assert (costs.flops, costs.params) == (plan.predicted_flops, plan.predicted_params)
    # greedy stops right after crossing: undoing the last removal falls below target
    widths = gi.widths()
    for gid, _, _ in plan.removals[:-1]:
        widths[gid] -= 1
    assert plan.origin_flops / gi.flops(widths) < target
    assert PrunePlan.from_text(plan.to_text()) == plan


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    reduce=st.sampled_from(["MEAN", "FIRST"]),
    normalize=st.sampled_from(["NONE", "MEAN", "MAX"]),
    p=st.sampled_from([1.0, 2.0, 1.5]),
)
def test_scores_and_plans_match_brute_force(seed, reduce, normalize, p):
    res = brute_force_comparison(seed, reduce, normalize, p)
    assert res["max_abs_error"] <= 1e-10
    assert res["ours"] == res["oracle"]
    assert res["origin_flops_ok"]


# -------------------------------------------------- structural soundness


@settings(max_examples=20, deadline=None)
@given(name=st.sampled_from(["tiny_mlp", "tiny_vgg", "tiny_resnet", "tiny_attn"]), seed=st.integers(0, 10_000))
def test_apply_prune_equals_masked_original(name, seed):
    assert prune_equivalence_error(name, seed) <= 1e-5


def test_plan_spec_mismatch_rejected():
    spec, params = build_architecture("tiny_vgg", 0)
    other, oparams = build_architecture("tiny_vgg", 0, widths=(4, 8, 8))
    plan = plan_prune(spec, params, None, CriterionConfig(), 1.2)
    with pytest.raises(PruneError, match="does not belong"):
        apply_prune(other, oparams, plan)


# ---------------------------------------------------------- masks


def test_unstructured_hand_example_and_identity():
    params = {"w.weight": torch.tensor([[0.1, -0.5, 0.3, 0.05]])}
    out, masks, frac = unstructured_prune(params, 0.5)
    assert masks["w.weight"].tolist() == [[0, 1, 1, 0]] and frac == 0.5
    assert torch.equal(out["w.weight"], params["w.weight"] * masks["w.weight"])
    out, masks, frac = unstructured_prune(params, 1.0)
    assert torch.equal(out["w.weight"], params["w.weight"]) and frac == 1.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), keep=st.floats(0.05, 1.0))
def test_unstructured_keep_fraction_and_oracle(seed, keep):
    spec, params = build_architecture("tiny_vgg", seed, widths=(4, 8))
    out, masks, frac = unstructured_prune(params, keep)
    total = sum(m.numel() for m in masks.values())
    kept = sum(int(m.sum()) for m in masks.values())
    assert abs(kept - keep * total) <= 1
    flat = np.concatenate([params[k].numpy().reshape(-1) for k in masks])
    oracle = oracles.magnitude_keep(flat.tolist(), keep)
    ours = np.concatenate([masks[k].numpy().reshape(-1) for k in masks])
    # ties broken differently are allowed only among equal magnitudes
    assert int(ours.sum()) == sum(oracle)
    assert np.abs(flat[ours == 1]).min() >= np.abs(flat[ours == 0]).max(initial=0)


def test_nm_hand_examples():
    w = torch.tensor([[0.1, -0.5, 0.3, 0.05]])
    assert nm_mask(w, 2, 4).tolist() == [[0, 1, 1, 0]]
    assert nm_mask(w, 4, 4).tolist() == [[1, 1, 1, 1]]
    assert nm_mask(torch.ones(1, 4), 1, 4).tolist() == [[1, 0, 0, 0]]
    with pytest.raises(ValueError):
        nm_mask(w, 5, 4)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), nm=st.sampled_from([(1, 4), (2, 4), (2, 8), (4, 8), (1, 2)]))
def test_nm_exact_counts_and_oracle(seed, nm):
    n, m = nm
    gen = torch.Generator().manual_seed(seed)
    w = torch.randn(3, 2 * m, 3, 3, generator=gen)
    mask = nm_mask(w, n, m)
    blocks = mask.movedim(1, -1).reshape(-1, m)
    assert torch.all(blocks.sum(1) == n)
    rows = w.movedim(1, -1).reshape(-1, 2 * m)
    for r in range(rows.shape[0]):
        expect = oracles.nm_block_mask(rows[r].tolist(), n, m)
        assert mask.movedim(1, -1).reshape(-1, 2 * m)[r].tolist() == expect
    _, _, frac = nm_prune({"c.weight": w}, n, m)
    assert frac == n / m


def test_nm_partial_block():
    w = torch.tensor([[4.0, 3.0, 2.0, 1.0, 5.0, 6.0]])
    assert nm_mask(w, 2, 4).tolist() == [[1, 1, 0, 0, 0, 1]]
