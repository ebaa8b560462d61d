import numpy as np
import pytest
import torch
from dataclasses import replace

from metaprune import tensorcore as tc
from metaprune.graphcodec import graph_to_network, network_to_graph
from metaprune.metanet import (
    MetaLayer,
    MetanetConfig,
    edge_invertor,
    init_metanetwork,
    load_metanet_state,
    metanet_apply,
    metanet_state,
    pna_stats,
)
from metaprune.netmodel import build_architecture

from .checks import rel_error
from .oracles import central_differences, pna_reference


def small_graph(arch="tiny_resnet", seed=0, **attrs):
    attrs = attrs or {"n": 2, "widths": (4, 8)}
    spec, params = build_architecture(arch, seed, **attrs)
    return spec, params, network_to_graph(spec, params)


@pytest.mark.parametrize("mode", ["pad", "project"])
def test_zero_ratios_are_exact_identity(mode):
    spec, params, g = small_graph()
    cfg = MetanetConfig.for_graph(g, num_layers=2, hidden_dim=8, node_res_ratio=0.0, edge_res_ratio=0.0, embed_mode=mode)
    out = metanet_apply(init_metanetwork(cfg, 3), g)
    assert torch.equal(out.node_feat, g.node_feat) and torch.equal(out.edge_feat, g.edge_feat)
    back = graph_to_network(out, spec)
    assert all(torch.equal(back[k], params[k]) for k in params)


def test_odd_hidden_dim_rejected():
    with pytest.raises(ValueError, match="even"):
        MetanetConfig(hidden_dim=7)


def test_edge_invertor_halves():
    assert edge_invertor(6).tolist() == [1, 1, 1, -1, -1, -1]


def test_pna_matches_reference_and_handles_singletons_and_isolated_nodes():
    rng = np.random.default_rng(0)
    msgs = torch.from_numpy(rng.normal(size=(9, 3)))
    index = torch.tensor([0, 0, 0, 2, 3, 3, 3, 3, 0])
    out = pna_stats(msgs, index, 5)
    for node in range(5):
        rows = [msgs[i].numpy() for i in range(9) if index[i] == node]
        expect = pna_reference(rows) if rows else np.zeros(12)
        assert np.allclose(out[node].numpy(), expect, atol=1e-12)
    # singleton: std is exactly zero and its gradient finite
    single = torch.tensor([[1e-3, 5.0]], dtype=torch.float64, requires_grad=True)
    stats = pna_stats(single, torch.tensor([0]), 1)
    assert stats[0, 2:4].tolist() == [0.0, 0.0]
    stats.sum().backward()
    assert torch.isfinite(single.grad).all()


def _permute_graph(g, perm):
    inv = torch.empty_like(perm)
    inv[perm] = torch.arange(len(perm))
    return replace(g, node_feat=g.node_feat[perm], edge_index=inv[g.edge_index])


def test_node_permutation_equivariance():
    with tc.float64_mode():
        spec, params, g = small_graph()
        g = replace(g, node_feat=g.node_feat.double(), edge_feat=g.edge_feat.double())
        cfg = MetanetConfig.for_graph(g, num_layers=3, hidden_dim=8, node_res_ratio=1.0, edge_res_ratio=1.0)
        net = init_metanetwork(cfg, 1, decoder_scale=1.0).double()
        perm = torch.randperm(g.num_nodes, generator=torch.Generator().manual_seed(0))
        out = metanet_apply(net, g)
        out_p = metanet_apply(net, _permute_graph(g, perm))
    assert torch.allclose(out_p.node_feat, out.node_feat[perm], atol=1e-10)
    assert torch.allclose(out_p.edge_feat, out.edge_feat, atol=1e-10)


def test_layer_node_update_is_orientation_invariant():
    torch.manual_seed(0)
    layer = MetaLayer(8).double()
    v = torch.randn(6, 8, dtype=torch.float64)
    src = torch.tensor([0, 1, 2, 0, 4])
    dst = torch.tensor([3, 3, 4, 5, 5])
    e = torch.randn(5, 8, dtype=torch.float64)
    flip = torch.tensor([True, False, True, True, False])
    src2 = torch.where(flip, dst, src)
    dst2 = torch.where(flip, src, dst)
    e2 = torch.where(flip[:, None], e * layer.inv.double(), e)
    v_a, _ = layer(v, src, dst, e)
    v_b, _ = layer(v, src2, dst2, e2)
    assert torch.allclose(v_a, v_b, atol=1e-12)


def test_edge_order_does_not_matter():
    spec, params, g = small_graph(seed=2)
    cfg = MetanetConfig.for_graph(g, num_layers=2, hidden_dim=8, node_res_ratio=1.0, edge_res_ratio=1.0)
    net = init_metanetwork(cfg, 0, decoder_scale=1.0).double()
    g = replace(g, node_feat=g.node_feat.double(), edge_feat=g.edge_feat.double())
    perm = torch.randperm(g.num_edges, generator=torch.Generator().manual_seed(1))
    g2 = replace(g, edge_index=g.edge_index[:, perm], edge_feat=g.edge_feat[perm], edge_family=g.edge_family[perm])
    a, b = metanet_apply(net, g), metanet_apply(net, g2)
    assert torch.allclose(a.node_feat, b.node_feat, atol=1e-10)
    assert torch.allclose(a.edge_feat[perm], b.edge_feat, atol=1e-10)


def test_gradients_match_finite_differences_in_float64():
    with tc.float64_mode():
        spec, params = build_architecture("tiny_mlp", 0, d_in=2, hidden=3, classes=2)
        g = network_to_graph(spec, {k: v.double() for k, v in params.items()})
        cfg = MetanetConfig.for_graph(g, num_layers=1, hidden_dim=4, node_res_ratio=1.0, edge_res_ratio=1.0)
        net = init_metanetwork(cfg, 0, decoder_scale=1.0).double()
        proj_n = torch.randn(g.node_feat.shape, dtype=torch.float64)
        proj_e = torch.randn(g.edge_feat.shape, dtype=torch.float64)
        named = dict(net.named_parameters())
        arrays = {k: p.detach().numpy() for k, p in named.items()}  # share storage with the parameters

        def value():
            with torch.no_grad():
                o = metanet_apply(net, g)
                return float((o.node_feat * proj_n).sum() + (o.edge_feat * proj_e).sum())

        o = metanet_apply(net, g)
        loss = (o.node_feat * proj_n).sum() + (o.edge_feat * proj_e).sum()
        auto = {k: gr.numpy() for k, gr in tc.gradients(loss, named).items()}
        numeric = central_differences(value, arrays, h=1e-6)
    assert rel_error(auto, numeric) <= 1e-4


def test_state_round_trip_and_width_checks():
    _, _, g = small_graph()
    cfg = MetanetConfig.for_graph(g, num_layers=1, hidden_dim=4, node_res_ratio=0.5, edge_res_ratio=0.5)
    net = init_metanetwork(cfg, 5)
    again = load_metanet_state(MetanetConfig.from_dict(cfg.to_dict()), metanet_state(net))
    assert torch.equal(metanet_apply(net, g).edge_feat, metanet_apply(again, g).edge_feat)
    _, _, other = small_graph("tiny_vgg", widths=(4, 8))
    with pytest.raises(ValueError, match="node feature width"):
        metanet_apply(net, other)


def test_same_seed_same_network():
    _, _, g = small_graph()
    cfg = MetanetConfig.for_graph(g, num_layers=1, hidden_dim=4)
    a, b = init_metanetwork(cfg, 9), init_metanetwork(cfg, 9)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
