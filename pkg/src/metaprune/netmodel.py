"""Toy architectures used as data models and pruning targets.

A network is a flat ``NetworkSpec`` (ordered ``LayerSpec`` list) plus a
``ParamStore`` (ordered ``dict`` name -> tensor).  Execution is functional:
``forward_logits(spec, params, x)`` reads weights from the store, so the same
code runs a freshly built network, a pruned one, or one decoded from a graph
with gradients attached.

Residual blocks are written as ``res_begin`` ... ``res_end`` brackets.  The
``res_end`` layer optionally carries a ``(conv, batchnorm)`` downsample pair
applied to the skip branch.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import torch

from . import tensorcore as tc
from .workbench.data import Dataset

log = logging.getLogger(__name__)

ParamStore = dict  # name -> torch.Tensor, insertion ordered

LAYER_KINDS = (
    "linear",
    "conv2d",
    "batchnorm",
    "relu",
    "res_begin",
    "res_end",
    "global_pool",
    "classifier",
    "mhsa",
)
BUFFER_SUFFIXES = (".running_mean", ".running_var")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    in_features: int = 0
    out_features: int = 0
    kernel: int = 1
    stride: int = 1
    bias: bool = False
    head_dims: tuple[int, ...] = ()
    downsample: tuple["LayerSpec", "LayerSpec"] | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unsupported layer kind {self.kind!r}")

    @property
    def heads(self) -> int:
        return len(self.head_dims)

    def to_dict(self) -> dict:
        defaults = {f.name: f.default for f in fields(self)}
        d = {k: v for k, v in asdict(self).items() if k == "kind" or v != defaults[k]}
        if self.downsample is not None:
            d["downsample"] = [self.downsample[0].to_dict(), self.downsample[1].to_dict()]
        if self.head_dims:
            d["head_dims"] = list(self.head_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        if d.get("downsample"):
            d["downsample"] = tuple(cls.from_dict(x) for x in d["downsample"])
        if "head_dims" in d:
            d["head_dims"] = tuple(d["head_dims"])
        return cls(**d)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    num_classes: int
    arch: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        list(walk_shapes(self))  # validates conformity

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            tuple(LayerSpec.from_dict(l) for l in d["layers"]),
            tuple(d["input_shape"]),
            int(d["num_classes"]),
            d.get("arch", "custom"),
        )

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def has_residual(self) -> bool:
        return any(l.kind == "res_end" for l in self.layers)

    @property
    def has_attention(self) -> bool:
        return any(l.kind == "mhsa" for l in self.layers)


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 0.1
    weight_decay: float = 5e-4
    milestones: tuple[int, ...] = ()
    batch_size: int = 128
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


def trainable(params: ParamStore) -> dict:
    return {k: v for k, v in params.items() if not is_buffer(k)}


# ------------------------------------------------------------ shape walking


def _conv_out(size: int, kernel: int, stride: int) -> int:
    return (size + 2 * (kernel // 2) - kernel) // stride + 1


def walk_shapes(spec: NetworkSpec) -> Iterator[tuple[LayerSpec, tuple, tuple]]:
    """Yield ``(layer, in_shape, out_shape)`` per layer, validating conformity.

    Shapes exclude the batch axis.
    """
    shape = spec.input_shape
    stack: list[tuple] = []
    n_cls = 0
    names: set[str] = set()

    def bad(layer, msg):
        raise ValueError(f"layer {layer.name or layer.kind!r}: {msg} (input shape {shape})")

    for i, layer in enumerate(spec.layers):
        k = layer.kind
        if layer.name:
            if layer.name in names:
                bad(layer, "duplicate layer name")
            names.add(layer.name)
        if n_cls:
            bad(layer, "classifier must be the final layer")
        if k in ("linear", "classifier", "conv2d", "batchnorm") and (layer.in_features <= 0 or (k != "batchnorm" and layer.out_features <= 0)):
            bad(layer, "channel counts must be positive")
        if k in ("linear", "classifier"):
            if shape[-1] != layer.in_features:
                bad(layer, f"expects {layer.in_features} input features")
            out = shape[:-1] + (layer.out_features,)
            if k == "classifier":
                n_cls += 1
                if len(out) != 1:
                    bad(layer, "classifier input must be flat")
                if layer.out_features != spec.num_classes:
                    bad(layer, "classifier width must equal the class count")
        elif k == "conv2d":
            if len(shape) != 3 or shape[0] != layer.in_features:
                bad(layer, f"expects {layer.in_features} input channels")
            out = (layer.out_features, _conv_out(shape[1], layer.kernel, layer.stride), _conv_out(shape[2], layer.kernel, layer.stride))
        elif k == "batchnorm":
            if shape[0] != layer.in_features:
                bad(layer, f"expects {layer.in_features} channels")
            out = shape
        elif k == "relu":
            out = shape
        elif k == "res_begin":
            stack.append(shape)
            out = shape
        elif k == "res_end":
            if not stack:
                bad(layer, "res_end without matching res_begin")
            skip = stack.pop()
            if layer.downsample is not None:
                conv, bn = layer.downsample
                if conv.kind != "conv2d" or bn.kind != "batchnorm":
                    bad(layer, "downsample must be a (conv2d, batchnorm) pair")
                if skip[0] != conv.in_features or conv.out_features != bn.in_features:
                    bad(layer, "downsample widths do not conform")
                for sub in (conv, bn):
                    if sub.name in names:
                        bad(layer, "duplicate layer name")
                    names.add(sub.name)
                skip = (conv.out_features, _conv_out(skip[1], conv.kernel, conv.stride), _conv_out(skip[2], conv.kernel, conv.stride))
            if skip != shape:
                bad(layer, f"skip shape {skip} does not match block output")
            out = shape
        elif k == "global_pool":
            if len(shape) == 3:
                out = (shape[0],)
            elif len(shape) == 2:
                out = (shape[1],)
            else:
                bad(layer, "global_pool needs CHW or token input")
        elif k == "mhsa":
            if len(shape) != 2 or shape[1] != layer.in_features:
                bad(layer, f"expects tokens of width {layer.in_features}")
            if not layer.head_dims or any(d < 0 for d in layer.head_dims) or sum(layer.head_dims) <= 0:
                bad(layer, "head dims must be positive")
            if layer.out_features <= 0:
                bad(layer, "output projection width must be positive")
            out = (shape[0], layer.out_features)
        yield layer, shape, out
        shape = out
    if stack:
        raise ValueError("unclosed res_begin")
    if n_cls > 1:
        raise ValueError("more than one classifier")


# ------------------------------------------------------------ architectures


def _kaiming_uniform(gen: torch.Generator, shape, fan_in: int) -> torch.Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return (torch.rand(shape, generator=gen) * 2 - 1) * bound


def _bias_uniform(gen: torch.Generator, n: int, fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(n, generator=gen) * 2 - 1) * bound


def init_params(spec: NetworkSpec, seed: int = 0) -> ParamStore:
    """Kaiming-uniform conv/linear weights, BN weight 1 / bias 0."""
    gen = torch.Generator().manual_seed(seed)
    params: ParamStore = {}

    def dense(layer: LayerSpec):
        fan_in = layer.in_features * layer.kernel**2
        shape = (layer.out_features, layer.in_features) + ((layer.kernel, layer.kernel) if layer.kind == "conv2d" else ())
        params[f"{layer.name}.weight"] = _kaiming_uniform(gen, shape, fan_in)
        if layer.bias:
            params[f"{layer.name}.bias"] = _bias_uniform(gen, layer.out_features, fan_in)

    def norm(layer: LayerSpec):
        c = layer.in_features
        params[f"{layer.name}.weight"] = torch.ones(c)
        params[f"{layer.name}.bias"] = torch.zeros(c)
        params[f"{layer.name}.running_mean"] = torch.zeros(c)
        params[f"{layer.name}.running_var"] = torch.ones(c)

    for layer in spec.layers:
        if layer.kind in ("linear", "classifier", "conv2d"):
            dense(layer)
        elif layer.kind == "batchnorm":
            norm(layer)
        elif layer.kind == "res_end" and layer.downsample is not None:
            dense(layer.downsample[0])
            norm(layer.downsample[1])
        elif layer.kind == "mhsa":
            width = sum(layer.head_dims)
            for proj in ("q", "k", "v"):
                params[f"{layer.name}.{proj}.weight"] = _kaiming_uniform(gen, (width, layer.in_features), layer.in_features)
                params[f"{layer.name}.{proj}.bias"] = _bias_uniform(gen, width, layer.in_features)
            params[f"{layer.name}.o.weight"] = _kaiming_uniform(gen, (layer.out_features, width), width)
            params[f"{layer.name}.o.bias"] = _bias_uniform(gen, layer.out_features, width)
    return params


def tiny_mlp(d_in: int = 2, hidden: int = 16, classes: int = 2, depth: int = 1) -> NetworkSpec:
    layers = []
    width = d_in
    for i in range(depth):
        layers += [LayerSpec("linear", f"fc{i + 1}", width, hidden, bias=True), LayerSpec("relu")]
        width = hidden
    layers.append(LayerSpec("classifier", "fc_out", width, classes, bias=True))
    return NetworkSpec(tuple(layers), (d_in,), classes, arch="tiny_mlp")


def tiny_resnet(
    n: int = 2, widths: tuple[int, ...] = (8, 16), in_channels: int = 1, image: int = 8, classes: int = 10
) -> NetworkSpec:
    """Stem conv, ``n`` basic blocks spread over the stages in ``widths``, pool, classifier.

    The first block of every stage after the first halves resolution and uses
    a 1x1 conv + BN downsample on the skip path.
    """
    if n < 1 or not widths:
        raise ValueError("tiny_resnet needs n >= 1 and at least one width")
    stages = len(widths)
    per_stage = [n // stages + (1 if s < n % stages else 0) for s in range(stages)]
    layers = [
        LayerSpec("conv2d", "conv0", in_channels, widths[0], kernel=3),
        LayerSpec("batchnorm", "bn0", widths[0]),
        LayerSpec("relu"),
    ]
    width = widths[0]
    b = 0
    for s, count in enumerate(per_stage):
        for j in range(count):
            out = widths[s]
            stride = 2 if (j == 0 and out != width) else 1
            p = f"block{b}"
            down = None
            if out != width or stride != 1:
                down = (
                    LayerSpec("conv2d", f"{p}.down", width, out, kernel=1, stride=stride),
                    LayerSpec("batchnorm", f"{p}.downbn", out),
                )
            layers += [
                LayerSpec("res_begin", f"{p}.begin"),
                LayerSpec("conv2d", f"{p}.conv1", width, out, kernel=3, stride=stride),
                LayerSpec("batchnorm", f"{p}.bn1", out),
                LayerSpec("relu"),
                LayerSpec("conv2d", f"{p}.conv2", out, out, kernel=3),
                LayerSpec("batchnorm", f"{p}.bn2", out),
                LayerSpec("res_end", f"{p}.end", downsample=down),
                LayerSpec("relu"),
            ]
            width = out
            b += 1
    layers += [LayerSpec("global_pool", "pool"), LayerSpec("classifier", "fc", width, classes, bias=True)]
    return NetworkSpec(tuple(layers), (in_channels, image, image), classes, arch=f"tiny_resnet{n}")


def tiny_vgg(widths: tuple[int, ...] = (8, 16, 16), in_channels: int = 1, image: int = 8, classes: int = 10) -> NetworkSpec:
    """Conv(+bias)/BN/ReLU stack; stride 2 wherever width grows."""
    layers = []
    width = in_channels
    for i, w in enumerate(widths):
        stride = 2 if (i > 0 and w > width) else 1
        layers += [
            LayerSpec("conv2d", f"conv{i}", width, w, kernel=3, stride=stride, bias=True),
            LayerSpec("batchnorm", f"bn{i}", w),
            LayerSpec("relu"),
        ]
        width = w
    layers += [LayerSpec("global_pool", "pool"), LayerSpec("classifier", "fc", width, classes, bias=True)]
    return NetworkSpec(tuple(layers), (in_channels, image, image), classes, arch="tiny_vgg")


def tiny_attn(tokens: int = 8, d: int = 8, heads: int = 2, head_dim: int = 4, classes: int = 10) -> NetworkSpec:
    layers = (
        LayerSpec("mhsa", "attn", d, d, head_dims=(head_dim,) * heads),
        LayerSpec("global_pool", "pool"),
        LayerSpec("classifier", "fc", d, classes, bias=True),
    )
    return NetworkSpec(layers, (tokens, d), classes, arch="tiny_attn")


_BUILDERS = {"tiny_mlp": tiny_mlp, "tiny_resnet": tiny_resnet, "tiny_vgg": tiny_vgg, "tiny_attn": tiny_attn}


def _normalize_name(name: str, attrs: dict) -> str:
    key = re.sub(r"(?<!^)(?=[A-Z])", "_", name).lower().replace("-", "_")
    m = re.fullmatch(r"tiny_res_?net_?(\d+)", key)
    if m:
        attrs.setdefault("n", int(m.group(1)))
        return "tiny_resnet"
    return key.replace("res_net", "resnet").replace("v_g_g", "vgg").replace("m_l_p", "mlp")


def build_architecture(name: str, seed: int = 0, **attrs) -> tuple[NetworkSpec, ParamStore]:
    """Build a named toy architecture and its seeded initial parameters.

    Accepted names: ``tiny_mlp``, ``tiny_resnet`` (or ``TinyResNet-4`` style
    with the block count in the name), ``tiny_vgg``, ``tiny_attn``.
    """
    attrs = dict(attrs)
    key = _normalize_name(name, attrs)
    if key not in _BUILDERS:
        raise ValueError(f"unknown architecture {name!r}; known: {sorted(_BUILDERS)}")
    for k in ("widths",):
        if k in attrs:
            attrs[k] = tuple(attrs[k])
    spec = _BUILDERS[key](**attrs)
    return spec, init_params(spec, seed)


# ------------------------------------------------------------------ forward


def forward_logits(
    spec: NetworkSpec,
    params: ParamStore,
    x: torch.Tensor,
    train: bool = False,
    update_stats: bool = True,
) -> torch.Tensor:
    """Run the network.  ``train`` selects batch-statistics BN; ``update_stats``
    controls whether running statistics are updated in that mode."""
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ValueError(f"batch shape {tuple(x.shape[1:])} does not match network input {spec.input_shape}")

    def bn(layer: LayerSpec, h):
        p = layer.name
        return tc.batchnorm(
            h, params[f"{p}.weight"], params[f"{p}.bias"], params[f"{p}.running_mean"], params[f"{p}.running_var"],
            training=train, update_stats=update_stats,
        )

    def conv(layer: LayerSpec, h):
        return tc.conv2d(h, params[f"{layer.name}.weight"], params.get(f"{layer.name}.bias"), layer.stride, layer.kernel // 2)

    h = x
    skips = []
    for layer in spec.layers:
        k = layer.kind
        if k in ("linear", "classifier"):
            h = tc.linear(h, params[f"{layer.name}.weight"], params.get(f"{layer.name}.bias"))
        elif k == "conv2d":
            h = conv(layer, h)
        elif k == "batchnorm":
            h = bn(layer, h)
        elif k == "relu":
            h = tc.relu(h)
        elif k == "res_begin":
            skips.append(h)
        elif k == "res_end":
            s = skips.pop()
            if layer.downsample is not None:
                s = bn(layer.downsample[1], conv(layer.downsample[0], s))
            h = tc.add(h, s)
        elif k == "global_pool":
            h = tc.global_avg_pool(h) if h.dim() == 4 else h.mean(dim=1)
        elif k == "mhsa":
            h = _mhsa(layer, params, h)
    return h


def _mhsa(layer: LayerSpec, params: ParamStore, x: torch.Tensor) -> torch.Tensor:
    """softmax(Q_h K_h^T) V_h per head (unscaled), concatenated, then output projection."""
    p = layer.name
    q = tc.linear(x, params[f"{p}.q.weight"], params[f"{p}.q.bias"])
    k = tc.linear(x, params[f"{p}.k.weight"], params[f"{p}.k.bias"])
    v = tc.linear(x, params[f"{p}.v.weight"], params[f"{p}.v.bias"])
    outs = []
    start = 0
    for dh in layer.head_dims:
        sl = slice(start, start + dh)
        att = torch.softmax(q[..., sl] @ k[..., sl].transpose(-1, -2), dim=-1)
        outs.append(att @ v[..., sl])
        start += dh
    y = torch.cat(outs, dim=-1)
    return tc.linear(y, params[f"{p}.o.weight"], params[f"{p}.o.bias"])


# -------------------------------------------------------------------- costs


@dataclass(frozen=True)
class Costs:
    flops: int  # multiply-accumulates per sample
    params: int

    def __iter__(self):
        return iter((self.flops, self.params))


def layer_costs(spec: NetworkSpec) -> list[tuple[str, int, int]]:
    """Per-layer ``(name, MACs, params)``; BN contributes params but no MACs."""
    rows = []

    def dense(layer: LayerSpec, out_shape):
        positions = math.prod(out_shape[1:]) if layer.kind == "conv2d" else math.prod(out_shape[:-1])
        macs = positions * layer.kernel**2 * layer.in_features * layer.out_features
        n = layer.kernel**2 * layer.in_features * layer.out_features + (layer.out_features if layer.bias else 0)
        rows.append((layer.name, macs, n))

    for layer, in_shape, out_shape in walk_shapes(spec):
        k = layer.kind
        if k in ("linear", "classifier", "conv2d"):
            dense(layer, out_shape)
        elif k == "batchnorm":
            rows.append((layer.name, 0, 2 * layer.in_features))
        elif k == "res_end" and layer.downsample is not None:
            conv, bn = layer.downsample
            # skip output spatial size equals the block output's
            dense(conv, out_shape)
            rows.append((bn.name, 0, 2 * bn.in_features))
        elif k == "mhsa":
            t = in_shape[0]
            width = sum(layer.head_dims)
            macs = t * (3 * layer.in_features * width + width * layer.out_features)
            n = 3 * (layer.in_features * width + width) + width * layer.out_features + layer.out_features
            rows.append((layer.name, macs, n))
    return rows


def count_costs(spec: NetworkSpec, params: ParamStore | None = None) -> Costs:
    rows = layer_costs(spec)
    costs = Costs(sum(r[1] for r in rows), sum(r[2] for r in rows))
    if params is not None:
        n = sum(t.numel() for k, t in params.items() if not is_buffer(k))
        if n != costs.params:
            raise ValueError(f"parameter store holds {n} trainable values, spec implies {costs.params}")
    return costs


# --------------------------------------------------------- train / evaluate


def clone_params(params: ParamStore) -> ParamStore:
    return {k: v.detach().clone() for k, v in params.items()}


@torch.no_grad()
def predict(spec: NetworkSpec, params: ParamStore, x: torch.Tensor, chunk: int = 1024) -> torch.Tensor:
    outs = [forward_logits(spec, params, x[i : i + chunk]) for i in range(0, x.shape[0], chunk)]
    return torch.cat(outs).argmax(dim=1)


def evaluate_accuracy(spec: NetworkSpec, params: ParamStore, dataset: Dataset) -> float:
    pred = predict(spec, params, dataset.x)
    return float((pred == dataset.y).float().mean())


def train(
    spec: NetworkSpec,
    params: ParamStore,
    dataset: Dataset,
    cfg: TrainConfig,
    test: Dataset | None = None,
    masks: dict[str, torch.Tensor] | None = None,
) -> tuple[ParamStore, list[dict]]:
    """SGD-momentum training with a milestone LR schedule.

    Returns a new parameter store and per-epoch history.  ``masks`` (name ->
    0/1 tensor) pins masked weights at zero throughout.
    """
    params = clone_params(params)
    history: list[dict] = []
    if cfg.epochs == 0:
        return params, history
    leaves = {k: v.requires_grad_(True) for k, v in params.items() if not is_buffer(k)}
    sched = tc.LrSchedule(cfg.lr, cfg.milestones, 0.1)
    state = tc.sgd_state(cfg.lr, cfg.momentum, cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(dataset)
    if masks:
        with torch.no_grad():
            for k, m in masks.items():
                params[k].mul_(m)
    for epoch in range(cfg.epochs):
        state.lr = tc.lr_at_epoch(sched, epoch)
        perm = torch.randperm(n, generator=gen)
        total, seen = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            logits = forward_logits(spec, params, dataset.x[idx], train=True)
            loss = tc.softmax_cross_entropy(logits, dataset.y[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch} (batch {i // cfg.batch_size})")
            grads = tc.gradients(loss, leaves)
            tc.sgd_step(state, leaves, grads)
            if masks:
                with torch.no_grad():
                    for k, m in masks.items():
                        params[k].mul_(m)
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        rec = {"epoch": epoch, "lr": state.lr, "train_loss": total / seen}
        if test is not None:
            rec["test_acc"] = evaluate_accuracy(spec, params, test)
        history.append(rec)
        log.debug("epoch %d %s", epoch, rec)
    return {k: v.detach() for k, v in params.items()}, history
