"""Graph metanetwork: encode, K message-passing layers, decode, residual delta.

Each layer first updates node states from messages over incident edges, then
updates edge states from the new node states.  Edge hidden vectors are split
into a symmetric half and an antisymmetric half: reading an edge from the
other endpoint multiplies it by the sign mask ``[+1..+1, -1..-1]``.

Aggregation is PNA-style: ``MLP_aggr([mean, std, max, min])`` over a node's
incident messages; a node with no incident edges aggregates an all-zero
vector.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .graphcodec import NeuralGraph
from .tensorcore import safe_sqrt


@dataclass
class MetanetConfig:
    num_layers: int = 4
    hidden_dim: int = 32
    node_in_dim: int = 8
    edge_in_dim: int = 9
    node_res_ratio: float = 0.01
    edge_res_ratio: float = 0.01
    embed_mode: str = "pad"
    # family name -> raw width, used by project mode
    edge_families: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.hidden_dim % 2:
            raise ValueError(f"hidden_dim must be even, got {self.hidden_dim}")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if self.embed_mode not in ("pad", "project"):
            raise ValueError(f"unknown embed mode {self.embed_mode!r}")
        if self.embed_mode == "project" and not self.edge_families:
            raise ValueError("project mode needs edge_families")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetanetConfig":
        return cls(**d)

    @classmethod
    def for_graph(cls, graph: NeuralGraph, **kw) -> "MetanetConfig":
        fams = {f.name: f.width for f in graph.codec.families}
        return cls(node_in_dim=graph.node_feat.shape[1], edge_in_dim=graph.edge_feat.shape[1], edge_families=fams, **kw)


class MLP(nn.Module):
    """Two linear layers with a ReLU between them."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


def edge_invertor(hidden_dim: int, dtype=None) -> torch.Tensor:
    half = hidden_dim // 2
    return torch.cat([torch.ones(half, dtype=dtype), -torch.ones(hidden_dim - half, dtype=dtype)])


def pna_stats(messages: torch.Tensor, index: torch.Tensor, num_nodes: int) -> torch.Tensor:
    """Per-node ``[mean, std, max, min]`` of ``messages`` grouped by ``index``; zeros for empty groups."""
    h = messages.shape[1]
    z = messages.new_zeros(num_nodes, h)
    deg = torch.bincount(index, minlength=num_nodes).to(messages.dtype).clamp(min=1).unsqueeze(1)
    mean = z.index_add(0, index, messages) / deg
    # centred second moment is exactly zero for singletons
    var = z.index_add(0, index, (messages - mean[index]) ** 2) / deg
    std = safe_sqrt(var)
    idx = index.unsqueeze(1).expand_as(messages)
    mx = z.scatter_reduce(0, idx, messages, "amax", include_self=False)
    mn = z.scatter_reduce(0, idx, messages, "amin", include_self=False)
    return torch.cat([mean, std, mx, mn], dim=1)


class MetaLayer(nn.Module):
    def __init__(self, hidden: int):
        super().__init__()
        self.node_msg1 = MLP(hidden, hidden, hidden)
        self.node_msg2 = MLP(hidden, hidden, hidden)
        self.aggr = MLP(4 * hidden, hidden, hidden)
        self.edge_upd1 = MLP(hidden, hidden, hidden)
        self.edge_upd2 = MLP(hidden, hidden, hidden)
        self.register_buffer("inv", edge_invertor(hidden), persistent=False)

    def pna(self, messages, index, num_nodes):
        return self.aggr(pna_stats(messages, index, num_nodes))

    def forward(self, v: torch.Tensor, src: torch.Tensor, dst: torch.Tensor, e: torch.Tensor):
        inv = self.inv.to(e.dtype)
        n = v.shape[0]
        # each stored edge seen from both endpoints; `e_rel` is the edge as read from `me`
        me = torch.cat([src, dst])
        other = torch.cat([dst, src])
        e_rel = torch.cat([e, e * inv])
        a1, a2 = self.node_msg1(v), self.node_msg2(v)
        m = a1[me] * a2[other] * e_rel
        m_rev = a1[other] * a2[me] * (e_rel * inv)
        v = v + self.pna(m, me, n) + self.pna(m_rev, me, n)
        b1, b2 = self.edge_upd1(v), self.edge_upd2(v)
        e = e + b1[src] * b2[dst] * e + b1[dst] * b2[src] * (e * inv)
        return v, e


class Metanetwork(nn.Module):
    def __init__(self, cfg: MetanetConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden_dim
        self.node_enc = MLP(cfg.node_in_dim, h, h)
        self.node_dec = MLP(h, h, cfg.node_in_dim)
        if cfg.embed_mode == "pad":
            self.edge_enc = nn.ModuleDict({"pad": MLP(cfg.edge_in_dim, h, h)})
            self.edge_dec = nn.ModuleDict({"pad": MLP(h, h, cfg.edge_in_dim)})
        else:
            self.edge_enc = nn.ModuleDict({k: MLP(w, h, h) for k, w in cfg.edge_families.items()})
            self.edge_dec = nn.ModuleDict({k: MLP(h, h, w) for k, w in cfg.edge_families.items()})
        self.layers = nn.ModuleList(MetaLayer(h) for _ in range(cfg.num_layers))

    def _encode_edges(self, graph: NeuralGraph, edge_feat: torch.Tensor) -> torch.Tensor:
        if self.cfg.embed_mode == "pad":
            return self.edge_enc["pad"](edge_feat)
        out = edge_feat.new_zeros(edge_feat.shape[0], self.cfg.hidden_dim)
        for i, f in enumerate(graph.codec.families):
            if f.name not in self.edge_enc:
                raise ValueError(f"metanetwork has no encoder for edge family {f.name!r}")
            ids = (graph.edge_family == i).nonzero().squeeze(1)
            out = out.index_put((ids,), self.edge_enc[f.name](edge_feat[ids][:, list(f.columns)]))
        return out

    def _decode_edges(self, graph: NeuralGraph, e: torch.Tensor, edge_feat: torch.Tensor) -> torch.Tensor:
        if self.cfg.embed_mode == "pad":
            return self.edge_dec["pad"](e)
        out = torch.zeros_like(edge_feat)
        for i, f in enumerate(graph.codec.families):
            ids = (graph.edge_family == i).nonzero().squeeze(1)
            cols = torch.tensor(f.columns, dtype=torch.long)
            block = out[ids].index_copy(1, cols, self.edge_dec[f.name](e[ids]))
            out = out.index_put((ids,), block)
        return out

    def forward(self, graph: NeuralGraph) -> NeuralGraph:
        return metanet_apply(self, graph)


def init_metanetwork(cfg: MetanetConfig, seed: int = 0, decoder_scale: float = 0.1) -> Metanetwork:
    """Seeded metanetwork; decoder output layers are scaled down so initial deltas are small."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = Metanetwork(cfg)
    with torch.no_grad():
        for dec in [net.node_dec, *net.edge_dec.values()]:
            dec.fc2.weight.mul_(decoder_scale)
            dec.fc2.bias.zero_()
    return net


def metanet_apply(net: Metanetwork, graph: NeuralGraph) -> NeuralGraph:
    cfg = net.cfg
    v_in, e_in = graph.node_feat, graph.edge_feat
    if v_in.shape[1] != cfg.node_in_dim:
        raise ValueError(f"node feature width {v_in.shape[1]} != metanetwork node_in_dim {cfg.node_in_dim}")
    if cfg.embed_mode == "pad" and e_in.shape[1] != cfg.edge_in_dim:
        raise ValueError(f"edge feature width {e_in.shape[1]} != metanetwork edge_in_dim {cfg.edge_in_dim}")
    src, dst = graph.edge_index
    v = net.node_enc(v_in)
    e = net._encode_edges(graph, e_in)
    for layer in net.layers:
        v, e = layer(v, src, dst, e)
    v_out = cfg.node_res_ratio * net.node_dec(v) + v_in
    e_out = cfg.edge_res_ratio * net._decode_edges(graph, e, e_in) + e_in
    return graph.with_features(v_out, e_out)


def metanet_state(net: Metanetwork) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in net.state_dict().items()}


def load_metanet_state(cfg: MetanetConfig, state: dict[str, torch.Tensor]) -> Metanetwork:
    net = Metanetwork(cfg)
    net.load_state_dict(state)
    return net
