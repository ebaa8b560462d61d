"""Invertible conversion between networks and featured graphs.

Every neuron / channel becomes a node, including the input layer.  Dense
connections (linear, conv, downsample conv, attention projections) become
edges carrying the flattened kernel; parameter-free skips become diagonal
1x1 edges with constant value 1.  Per-channel parameters (batchnorm affine
and statistics, biases) become node features.

The ``CodecMap`` stores, for every network tensor, an index tensor of the same
shape pointing into the flattened node or edge feature matrix.  Decoding is a
gather, so it is exact and differentiable.  Feature slots that no tensor maps
to hold constant defaults and are ignored on decode.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace

import torch

from .netmodel import LayerSpec, NetworkSpec, ParamStore, is_buffer

NODE_LAYOUTS: dict[str, dict] = {
    # previous-layer BN (4) + skip-path BN (4)
    "resnet": {
        "slots": ("bn.weight", "bn.bias", "bn.running_mean", "bn.running_var",
                  "res_bn.weight", "res_bn.bias", "res_bn.running_mean", "res_bn.running_var"),
        "default": (1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0),
        "bias": 1,
    },
    # previous-layer BN (4) + previous-layer bias
    "vgg": {
        "slots": ("bn.weight", "bn.bias", "bn.running_mean", "bn.running_var", "bias"),
        "default": (1.0, 0.0, 0.0, 1.0, 0.0),
        "bias": 4,
    },
    # norm weight/bias, linear bias, q/k/v biases
    "attn": {
        "slots": ("ln.weight", "ln.bias", "bias", "q_bias", "k_bias", "v_bias"),
        "default": (1.0, 0.0, 0.0, 0.0, 0.0, 0.0),
        "bias": 2,
    },
}
_BN_FIELDS = ("weight", "bias", "running_mean", "running_var")


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class EdgeFamily:
    name: str
    width: int
    kernel: int  # 0 for non-kernel families
    columns: tuple[int, ...]


@dataclass
class Slot:
    target: str  # "node" | "edge"
    index: torch.Tensor  # long, same shape as the tensor it encodes
    trainable: bool


@dataclass
class CodecMap:
    spec_fingerprint: str
    layout: str
    node_owner: list[tuple[str, int]]
    layer_nodes: dict[str, tuple[int, int]]
    families: tuple[EdgeFamily, ...]
    slots: dict[str, Slot]

    @property
    def node_dim(self) -> int:
        return len(NODE_LAYOUTS[self.layout]["slots"])

    @property
    def edge_dim(self) -> int:
        return 1 + max(c for f in self.families for c in f.columns)

    def family_index(self, name: str) -> int:
        for i, f in enumerate(self.families):
            if f.name == name:
                return i
        raise CodecError(f"unknown edge family {name!r}")

    def to_json(self) -> str:
        return json.dumps({
            "spec_fingerprint": self.spec_fingerprint,
            "layout": self.layout,
            "node_owner": [list(o) for o in self.node_owner],
            "layer_nodes": {k: list(v) for k, v in self.layer_nodes.items()},
            "families": [{"name": f.name, "width": f.width, "kernel": f.kernel, "columns": list(f.columns)} for f in self.families],
            "slots": {
                k: {"target": s.target, "trainable": s.trainable, "shape": list(s.index.shape), "index": s.index.reshape(-1).tolist()}
                for k, s in self.slots.items()
            },
        })

    @classmethod
    def from_json(cls, text: str) -> "CodecMap":
        d = json.loads(text)
        return cls(
            d["spec_fingerprint"],
            d["layout"],
            [tuple(o) for o in d["node_owner"]],
            {k: tuple(v) for k, v in d["layer_nodes"].items()},
            tuple(EdgeFamily(f["name"], f["width"], f["kernel"], tuple(f["columns"])) for f in d["families"]),
            {
                k: Slot(s["target"], torch.tensor(s["index"], dtype=torch.long).reshape(s["shape"]), s["trainable"])
                for k, s in d["slots"].items()
            },
        )


@dataclass
class NeuralGraph:
    node_feat: torch.Tensor  # (N, node_dim)
    edge_index: torch.Tensor  # (2, E) long; row 0 = earlier layer
    edge_feat: torch.Tensor  # (E, edge_dim), canonical padded layout
    edge_family: torch.Tensor  # (E,) long, index into codec.families
    codec: CodecMap

    @property
    def num_nodes(self) -> int:
        return self.node_feat.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edge_index.shape[1]

    def with_features(self, node_feat: torch.Tensor, edge_feat: torch.Tensor) -> "NeuralGraph":
        if node_feat.shape != self.node_feat.shape or edge_feat.shape != self.edge_feat.shape:
            raise CodecError("feature shapes must match the graph topology")
        return replace(self, node_feat=node_feat, edge_feat=edge_feat)


# ----------------------------------------------------------------- helpers


def pick_layout(spec: NetworkSpec) -> str:
    if spec.has_attention:
        return "attn"
    if spec.has_residual:
        return "resnet"
    return "vgg"


def pad_kernel(kernel: torch.Tensor, size: int) -> torch.Tensor:
    """Zero-pad a ``k x k`` kernel into a centred ``size x size`` footprint and flatten."""
    k = kernel.shape[-1]
    if k > size or (size - k) % 2:
        raise CodecError(f"cannot centre a {k}x{k} kernel in {size}x{size}")
    off = (size - k) // 2
    out = kernel.new_zeros(kernel.shape[:-2] + (size, size))
    out[..., off : off + k, off : off + k] = kernel
    return out.reshape(kernel.shape[:-2] + (size * size,))


def _family_columns(families: dict[str, tuple[int, int]]) -> tuple[EdgeFamily, ...]:
    """Place every family's raw features inside one padded edge vector."""
    kernels = [k for (w, k) in families.values() if k]
    kmax = max(kernels) if kernels else 1
    width = max([kmax * kmax] + [w for (w, k) in families.values()])
    square = width == kmax * kmax
    out = []
    for name in sorted(families, key=lambda n: (families[n][1] == 0, families[n][0], n)):
        w, k = families[name]
        if k and square:
            off = (kmax - k) // 2
            cols = tuple((off + r) * kmax + off + c for r in range(k) for c in range(k))
        else:
            cols = tuple(range(w))
        out.append(EdgeFamily(name, w, k, cols))
    return tuple(out)


# ---------------------------------------------------------------- encoding


class _Builder:
    def __init__(self, spec: NetworkSpec, layout: str):
        self.spec = spec
        self.layout = layout
        self.nodes: list[tuple[str, int]] = []
        self.layer_nodes: dict[str, tuple[int, int]] = {}
        # pending edge blocks: (family, src_start, src_count, dst_start, dst_count, kind, payload)
        self.blocks: list[tuple] = []
        self.node_slots: list[tuple[str, int, int, int]] = []  # (param, node_start, count, col)
        self.families: dict[str, tuple[int, int]] = {}
        self.bn_done: set[str] = set()

    def add_layer(self, name: str, count: int) -> tuple[int, int]:
        start = len(self.nodes)
        self.nodes += [(name, c) for c in range(count)]
        self.layer_nodes[name] = (start, count)
        return start, count

    def family(self, name: str, width: int, kernel: int) -> str:
        self.families.setdefault(name, (width, kernel))
        return name

    def dense(self, src, dst, param: str, kernel: int):
        fam = self.family(f"k{kernel}", kernel * kernel, kernel)
        self.blocks.append((fam, src, dst, "dense", param))

    def bn(self, layer: LayerSpec, dst, offset: int):
        key = (dst[0], offset)
        if key in self.bn_done:
            raise CodecError(f"two batchnorms map to the same node slots ({layer.name})")
        self.bn_done.add(key)
        for i, f in enumerate(_BN_FIELDS):
            self.node_slots.append((f"{layer.name}.{f}", dst[0], dst[1], offset + i))

    def bias(self, param: str, dst, col: int):
        self.node_slots.append((param, dst[0], dst[1], col))


def network_to_graph(spec: NetworkSpec, params: ParamStore, layout: str | None = None) -> NeuralGraph:
    layout = layout or pick_layout(spec)
    if layout not in NODE_LAYOUTS:
        raise CodecError(f"unknown node layout {layout!r}")
    lay = NODE_LAYOUTS[layout]
    b = _Builder(spec, layout)
    in_width = spec.input_shape[0] if len(spec.input_shape) == 3 else spec.input_shape[-1]
    cur = b.add_layer("input", in_width)
    cur_has_bn = False
    stack = []
    for layer in spec.layers:
        k = layer.kind
        if k in ("linear", "classifier", "conv2d"):
            nxt = b.add_layer(layer.name, layer.out_features)
            b.dense(cur, nxt, f"{layer.name}.weight", layer.kernel)
            if layer.bias:
                b.bias(f"{layer.name}.bias", nxt, lay["bias"])
            cur, cur_has_bn = nxt, False
            cur_bias = layer.bias
        elif k == "batchnorm":
            if layout == "attn":
                raise CodecError("batchnorm is not representable in the attention layout")
            if cur_has_bn:
                raise CodecError(f"consecutive batchnorms ({layer.name}) are not supported")
            if layout == "resnet" and cur_bias:
                raise CodecError(f"{layer.name}: resnet layout cannot hold both a bias and a batchnorm")
            b.bn(layer, cur, 0)
            cur_has_bn = True
        elif k in ("relu", "global_pool"):
            continue
        elif k == "res_begin":
            stack.append(cur)
        elif k == "res_end":
            src = stack.pop()
            if layout != "resnet":
                raise CodecError("residual connections need the resnet layout")
            if layer.downsample is None:
                if src[1] != cur[1]:
                    raise CodecError(f"{layer.name}: identity skip between layers of different width")
                b.family("k1", 1, 1)
                b.blocks.append(("k1", src, cur, "identity", None))
            else:
                conv, norm = layer.downsample
                b.dense(src, cur, f"{conv.name}.weight", conv.kernel)
                b.bn(norm, cur, 4)
        elif k == "mhsa":
            head = b.add_layer(f"{layer.name}.heads", sum(layer.head_dims))
            fam = b.family("qkv", 3, 0)
            b.blocks.append((fam, cur, head, "qkv", layer.name))
            cols = {"q": 3, "k": 4, "v": 5}
            for p, col in cols.items():
                b.bias(f"{layer.name}.{p}.bias", head, col)
            out = b.add_layer(f"{layer.name}.out", layer.out_features)
            b.dense(head, out, f"{layer.name}.o.weight", 1)
            b.bias(f"{layer.name}.o.bias", out, lay["bias"])
            cur, cur_has_bn, cur_bias = out, False, True
        else:
            raise CodecError(f"unsupported layer kind {k!r}")

    families = _family_columns(b.families)
    fam_of = {f.name: i for i, f in enumerate(families)}
    edge_dim = 1 + max(c for f in families for c in f.columns)
    node_dim = len(lay["slots"])
    n_nodes = len(b.nodes)

    slots: dict[str, Slot] = {}
    src_idx, dst_idx, fam_idx = [], [], []
    consts: list[tuple[torch.Tensor, float]] = []
    base = 0
    for fam, src, dst, kind, payload in b.blocks:
        f = families[fam_of[fam]]
        cols = torch.tensor(f.columns, dtype=torch.long)
        if kind == "identity":
            n = src[1]
            src_idx.append(torch.arange(n) + src[0])
            dst_idx.append(torch.arange(n) + dst[0])
            consts.append(((base + torch.arange(n)) * edge_dim + cols[0], 1.0))
        else:
            n_src, n_dst = src[1], dst[1]
            n = n_src * n_dst
            o = torch.arange(n_dst).repeat_interleave(n_src)
            i = torch.arange(n_src).repeat(n_dst)
            src_idx.append(i + src[0])
            dst_idx.append(o + dst[0])
            edge_ids = base + torch.arange(n).reshape(n_dst, n_src)
            if kind == "dense":
                kk = f.kernel * f.kernel
                idx = edge_ids[:, :, None] * edge_dim + cols[None, None, :kk]
                shape = params[payload].shape
                slots[payload] = Slot("edge", idx.reshape(shape), True)
            else:  # qkv
                for c, p in enumerate(("q", "k", "v")):
                    slots[f"{payload}.{p}.weight"] = Slot("edge", edge_ids * edge_dim + cols[c], True)
        fam_idx.append(torch.full((n,), fam_of[fam], dtype=torch.long))
        base += n

    for param, start, count, col in b.node_slots:
        idx = (start + torch.arange(count)) * node_dim + col
        slots[param] = Slot("node", idx, not is_buffer(param))

    # coverage: each tensor maps exactly once, no slot is shared
    missing = set(params) - set(slots)
    extra = set(slots) - set(params)
    if missing or extra:
        raise CodecError(f"codec does not cover the parameter store (missing={sorted(missing)[:4]}, unknown={sorted(extra)[:4]})")
    for name, s in slots.items():
        if tuple(s.index.shape) != tuple(params[name].shape):
            raise CodecError(f"{name}: slot shape {tuple(s.index.shape)} != tensor shape {tuple(params[name].shape)}")
    for target in ("node", "edge"):
        allidx = torch.cat([s.index.reshape(-1) for s in slots.values() if s.target == target] + [torch.empty(0, dtype=torch.long)])
        if target == "edge":
            allidx = torch.cat([allidx] + [c for c, _ in consts])
        if allidx.unique().numel() != allidx.numel():
            raise CodecError(f"overlapping {target} slots")

    order = list(params)
    codec = CodecMap(
        spec.fingerprint(), layout, list(b.nodes), dict(b.layer_nodes), families, {k: slots[k] for k in order}
    )
    dtype = next(iter(params.values())).dtype if params else torch.get_default_dtype()
    node_feat = torch.tensor(lay["default"], dtype=dtype).repeat(n_nodes, 1)
    edge_index = torch.stack([torch.cat(src_idx), torch.cat(dst_idx)]) if src_idx else torch.empty(2, 0, dtype=torch.long)
    n_edges = edge_index.shape[1]
    edge_feat = torch.zeros(n_edges, edge_dim, dtype=dtype)
    node_flat, edge_flat = node_feat.view(-1), edge_feat.view(-1)
    for idx, value in consts:
        edge_flat[idx] = value
    for name, s in codec.slots.items():
        (node_flat if s.target == "node" else edge_flat)[s.index.reshape(-1)] = params[name].detach().reshape(-1).to(dtype)
    edge_family = torch.cat(fam_idx) if fam_idx else torch.empty(0, dtype=torch.long)
    return NeuralGraph(node_feat, edge_index, edge_feat, edge_family, codec)


def encode_differentiable(graph: NeuralGraph, params: ParamStore) -> NeuralGraph:
    """Re-encode ``params`` into ``graph``'s slots keeping autograd history."""
    node = graph.node_feat.detach().clone().reshape(-1)
    edge = graph.edge_feat.detach().clone().reshape(-1)
    for name, s in graph.codec.slots.items():
        flat = params[name].reshape(-1)
        if s.target == "node":
            node = node.index_put((s.index.reshape(-1),), flat)
        else:
            edge = edge.index_put((s.index.reshape(-1),), flat)
    return graph.with_features(node.reshape(graph.node_feat.shape), edge.reshape(graph.edge_feat.shape))


# ---------------------------------------------------------------- decoding


def graph_to_network(graph: NeuralGraph, spec: NetworkSpec, reference: ParamStore | None = None) -> ParamStore:
    """Read every tensor back from its slot.

    Running statistics (untrainable) are copied from ``reference`` when given,
    otherwise read from the graph.  The result stays attached to the autograd
    history of the graph features.
    """
    codec = graph.codec
    if codec.spec_fingerprint != spec.fingerprint():
        raise CodecError("codec map was built for a different network spec")
    node_flat = graph.node_feat.reshape(-1)
    edge_flat = graph.edge_feat.reshape(-1)
    out: ParamStore = {}
    for name, s in codec.slots.items():
        if not s.trainable and reference is not None:
            if reference[name].shape != s.index.shape:
                raise CodecError(f"{name}: reference shape mismatch")
            out[name] = reference[name]
            continue
        src = node_flat if s.target == "node" else edge_flat
        out[name] = src[s.index]
    return out


def mhsa_to_graph(layer: LayerSpec, params: ParamStore) -> NeuralGraph:
    """Graph fragment for one attention layer: d input, H*d_H head, d_out output nodes."""
    if layer.kind != "mhsa":
        raise CodecError("mhsa_to_graph needs an mhsa layer")
    width = sum(layer.head_dims)
    q = params.get(f"{layer.name}.q.weight")
    if q is None or q.shape != (width, layer.in_features):
        raise CodecError(
            f"{layer.name}: head dims {layer.head_dims} inconsistent with projection shape {None if q is None else tuple(q.shape)}"
        )
    sub = {k: v for k, v in params.items() if k.startswith(f"{layer.name}.")}
    spec = NetworkSpec((layer,), (1, layer.in_features), 0, arch="mhsa_fragment")
    return network_to_graph(spec, sub, layout="attn")


# ------------------------------------------------------------ edge embedding


def embed_edge_features(
    graph: NeuralGraph, mode: str = "pad", projections: dict[str, tuple[torch.Tensor, torch.Tensor | None]] | None = None
) -> torch.Tensor:
    """Uniform-width edge features.

    ``pad``: the canonical padded layout (kernels centred in the largest
    footprint).  ``project``: per-family linear maps ``(weight, bias)``
    applied to each family's raw features.
    """
    if mode == "pad":
        return graph.edge_feat
    if mode != "project":
        raise ValueError(f"unknown embed mode {mode!r}")
    if not projections:
        raise ValueError("project mode needs one projection per edge family")
    fams = graph.codec.families
    unknown = set(projections) - {f.name for f in fams}
    if unknown:
        raise CodecError(f"unknown edge families {sorted(unknown)}")
    dims = {projections[f.name][0].shape[0] for f in fams if f.name in projections}
    if len(dims) != 1:
        raise CodecError("projections must share one output width")
    out = graph.edge_feat.new_zeros(graph.num_edges, dims.pop())
    for i, f in enumerate(fams):
        if f.name not in projections:
            raise CodecError(f"no projection for edge family {f.name!r}")
        mask = graph.edge_family == i
        w, bias = projections[f.name]
        raw = graph.edge_feat[mask][:, list(f.columns)]
        out = out.index_put((mask.nonzero().squeeze(1),), torch.nn.functional.linear(raw, w, bias))
    return out


def family_raw(graph: NeuralGraph, edge_feat: torch.Tensor | None = None) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Per family ``(edge ids, raw features)``."""
    ef = graph.edge_feat if edge_feat is None else edge_feat
    out = []
    for i, f in enumerate(graph.codec.families):
        ids = (graph.edge_family == i).nonzero().squeeze(1)
        out.append((ids, ef[ids][:, list(f.columns)]))
    return out


def expected_counts(spec: NetworkSpec) -> tuple[int, int]:
    """Closed-form (nodes, edges) for the conversion rules above."""
    in_width = spec.input_shape[0] if len(spec.input_shape) == 3 else spec.input_shape[-1]
    nodes, edges = in_width, 0
    width = in_width
    stack = []
    for layer in spec.layers:
        if layer.kind in ("linear", "classifier", "conv2d"):
            nodes += layer.out_features
            edges += width * layer.out_features
            width = layer.out_features
        elif layer.kind == "res_begin":
            stack.append(width)
        elif layer.kind == "res_end":
            w0 = stack.pop()
            edges += width if layer.downsample is None else w0 * width
        elif layer.kind == "mhsa":
            hd = sum(layer.head_dims)
            nodes += hd + layer.out_features
            edges += width * hd + hd * layer.out_features
            width = layer.out_features
    return nodes, edges
