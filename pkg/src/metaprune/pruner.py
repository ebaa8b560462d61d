"""Structural pruning: dependency groups, group-norm scores, sparsity gradients,
greedy planning and physical slicing; plus unstructured and N:M masks.

Channel spaces are discovered by walking the layer list.  Every conv/linear
output axis opens a space; consumers read from the current space; identity
skips and downsample outputs merge spaces (union-find).  A merged space is a
pruning group: every member slice along its axis shares the group's K dims.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

import torch

from .netmodel import LayerSpec, NetworkSpec, ParamStore, is_buffer, walk_shapes

REDUCE_OPS = ("MEAN", "FIRST")
NORMALIZE_OPS = ("NONE", "MEAN", "MAX")


class PruneError(ValueError):
    pass


@dataclass(frozen=True)
class Member:
    param: str
    axis: int
    offset: int  # group dim k lives at index offset + k along axis
    scored: bool
    is_bn: bool = False  # batchnorm weight; scored only when the criterion asks


@dataclass
class PruningGroup:
    gid: int
    size: int
    members: list[Member]
    prunable: bool


@dataclass
class CriterionConfig:
    p: float = 2.0
    reduce: str = "MEAN"
    normalize: str = "MAX"
    shrink_alpha: float = 4.0
    importance_only: bool = False
    include_bn: bool = False

    def __post_init__(self):
        self.reduce = self.reduce.upper()
        self.normalize = self.normalize.upper()
        if self.reduce not in REDUCE_OPS:
            raise ValueError(f"reduce must be one of {REDUCE_OPS}")
        if self.normalize not in NORMALIZE_OPS:
            raise ValueError(f"normalize must be one of {NORMALIZE_OPS}")
        if self.p <= 0:
            raise ValueError("p must be > 0")
        if self.shrink_alpha < 0:
            raise ValueError("shrink_alpha must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroupIndex:
    """Groups plus the bookkeeping needed to rebuild a spec at new widths."""

    spec: NetworkSpec
    groups: list[PruningGroup]
    layer_io: dict[str, tuple[int, int]]  # layer name -> (in group, out group)
    heads: dict[str, list[int]]  # mhsa layer name -> per-head group ids
    flop_terms: list[tuple[int, int, int]]  # coef * width[a] * width[b]
    param_terms: list[tuple[int, int, int]]  # coef * width[a] * width[b]; b = -1 for linear terms

    def widths(self) -> list[int]:
        return [g.size for g in self.groups]

    def flops(self, widths) -> int:
        return sum(c * widths[a] * widths[b] for c, a, b in self.flop_terms)

    def params(self, widths) -> int:
        return sum(c * widths[a] * (widths[b] if b >= 0 else 1) for c, a, b in self.param_terms)


class _UnionFind:
    def __init__(self):
        self.parent: list[int] = []

    def make(self) -> int:
        self.parent.append(len(self.parent))
        return len(self.parent) - 1

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def build_pruning_groups(spec: NetworkSpec) -> GroupIndex:
    uf = _UnionFind()
    size: list[int] = []
    members: list[list[tuple[int, Member]]] = []  # per space: (walk order, member)
    fixed: set[int] = set()
    seq = [0]

    def space(n: int) -> int:
        s = uf.make()
        size.append(n)
        members.append([])
        return s

    def add(s: int, param: str, axis: int, scored: bool, offset: int = 0, bn_weight: bool = False):
        members[s].append((seq[0], Member(param, axis, offset, scored, bn_weight)))
        seq[0] += 1

    def add_norm(s: int, layer: LayerSpec):
        add(s, f"{layer.name}.weight", 0, False, bn_weight=True)
        for f in ("bias", "running_mean", "running_var"):
            add(s, f"{layer.name}.{f}", 0, False)

    layer_io: dict[str, tuple[int, int]] = {}
    heads: dict[str, list[int]] = {}
    flop_terms: list[tuple[int, int, int]] = []
    param_terms: list[tuple[int, int, int]] = []
    in_width = spec.input_shape[0] if len(spec.input_shape) == 3 else spec.input_shape[-1]
    cur = space(in_width)
    fixed.add(cur)
    stack: list[tuple[int, tuple]] = []

    def dense(layer: LayerSpec, src: int, out_shape) -> int:
        dst = space(layer.out_features)
        add(src, f"{layer.name}.weight", 1, True)
        add(dst, f"{layer.name}.weight", 0, True)
        if layer.bias:
            add(dst, f"{layer.name}.bias", 0, False)
            param_terms.append((1, dst, -1))
        positions = math.prod(out_shape[1:]) if layer.kind == "conv2d" else math.prod(out_shape[:-1])
        flop_terms.append((positions * layer.kernel**2, src, dst))
        param_terms.append((layer.kernel**2, src, dst))
        layer_io[layer.name] = (src, dst)
        return dst

    for layer, in_shape, out_shape in walk_shapes(spec):
        k = layer.kind
        if k in ("linear", "conv2d", "classifier"):
            cur = dense(layer, cur, out_shape)
            if k == "classifier":
                fixed.add(cur)
        elif k == "batchnorm":
            add_norm(cur, layer)
            param_terms.append((2, cur, -1))
            layer_io[layer.name] = (cur, cur)
        elif k == "res_begin":
            stack.append((cur, in_shape))
        elif k == "res_end":
            src, _ = stack.pop()
            if layer.downsample is None:
                uf.union(src, cur)
            else:
                conv, norm = layer.downsample
                d = dense(conv, src, out_shape)
                add_norm(d, norm)
                param_terms.append((2, d, -1))
                layer_io[norm.name] = (d, d)
                uf.union(d, cur)
        elif k == "mhsa":
            t = in_shape[0]
            hs = []
            for h, dh in enumerate(layer.head_dims):
                s = space(dh)
                off = sum(layer.head_dims[:h])
                for proj in ("q", "k", "v"):
                    add(s, f"{layer.name}.{proj}.weight", 0, True, off)
                    add(s, f"{layer.name}.{proj}.bias", 0, False, off)
                add(s, f"{layer.name}.o.weight", 1, True, off)
                flop_terms.append((3 * t, cur, s))
                param_terms.append((3, cur, s))
                param_terms.append((3, s, -1))
                hs.append(s)
            for proj in ("q", "k", "v"):
                add(cur, f"{layer.name}.{proj}.weight", 1, True)
            out = space(layer.out_features)
            add(out, f"{layer.name}.o.weight", 0, True)
            add(out, f"{layer.name}.o.bias", 0, False)
            for s in hs:
                flop_terms.append((t, s, out))
                param_terms.append((1, s, out))
            param_terms.append((1, out, -1))
            layer_io[layer.name] = (cur, out)
            heads[layer.name] = hs
            cur = out
        elif k in ("relu", "global_pool"):
            continue
        else:
            raise PruneError(f"unsupported layer kind {k!r}")

    roots = sorted({uf.find(s) for s in range(len(size))})
    gid_of_root = {r: i for i, r in enumerate(roots)}
    gid = [gid_of_root[uf.find(s)] for s in range(len(size))]
    groups = []
    for r in roots:
        spaces = [s for s in range(len(size)) if uf.find(s) == r]
        widths = {size[s] for s in spaces}
        if len(widths) != 1:
            raise PruneError(f"coupled channel spaces disagree on width: {sorted(widths)}")
        mem = [m for _, m in sorted((e for s in spaces for e in members[s]), key=lambda e: e[0])]
        groups.append(PruningGroup(gid_of_root[r], size[r], mem, not any(s in fixed for s in spaces)))
    return GroupIndex(
        spec,
        groups,
        {n: (gid[a], gid[b]) for n, (a, b) in layer_io.items()},
        {n: [gid[s] for s in hs] for n, hs in heads.items()},
        [(c, gid[a], gid[b]) for c, a, b in flop_terms],
        [(c, gid[a], gid[b] if b >= 0 else -1) for c, a, b in param_terms],
    )


# ---------------------------------------------------------------- criterion


def _slice(params: ParamStore, m: Member, size: int) -> torch.Tensor:
    """Member slice as (K, rest)."""
    w = params[m.param].narrow(m.axis, m.offset, size)
    return w.movedim(m.axis, 0).reshape(size, -1)


def _scored(group: PruningGroup, criterion: CriterionConfig) -> list[Member]:
    return [m for m in group.members if m.scored or (criterion.include_bn and m.is_bn)]


def raw_importance(params: ParamStore, group: PruningGroup, criterion: CriterionConfig) -> torch.Tensor:
    """I_{g,k}: reduce over scored members of sum |w[k]|^p."""
    scored = _scored(group, criterion)
    if not scored:
        raise PruneError(f"group {group.gid} has no scored members")
    if criterion.reduce == "FIRST":
        scored = scored[:1]
    per = torch.stack([_slice(params, m, group.size).detach().abs().pow(criterion.p).sum(1) for m in scored])
    return per.mean(0)


def _denominator(I: torch.Tensor, normalize: str) -> torch.Tensor:
    if normalize == "NONE":
        return I.new_tensor(1.0)
    d = I.mean() if normalize == "MEAN" else I.max()
    return d if d > 0 else I.new_tensor(1.0)


def importance_scores(params: ParamStore, group: PruningGroup, criterion: CriterionConfig) -> torch.Tensor:
    """Normalized scores; an all-zero group scores all-zero."""
    I = raw_importance(params, group, criterion)
    return I / _denominator(I, criterion.normalize)


def shrinkage_weights(I: torch.Tensor, shrink_alpha: float) -> torch.Tensor:
    """2^(alpha * (sqrt(Imax) - sqrt(I)) / (sqrt(Imax) - sqrt(Imin))); ones when degenerate."""
    r = I.clamp(min=0).sqrt()
    lo, hi = r.min(), r.max()
    if hi - lo <= 0:
        return torch.ones_like(I)
    return torch.pow(2.0, shrink_alpha * (hi - r) / (hi - lo))


def sparsity_gradients(
    params: ParamStore, groups: GroupIndex | list[PruningGroup], criterion: CriterionConfig
) -> dict[str, torch.Tensor]:
    """d/dw of sum_k gamma_k * I_k / denom over prunable groups, gamma and denom held constant."""
    glist = groups.groups if isinstance(groups, GroupIndex) else groups
    out: dict[str, torch.Tensor] = {}
    p = criterion.p
    for g in glist:
        if not g.prunable:
            continue
        I = raw_importance(params, g, criterion)
        scale = shrinkage_weights(I, criterion.shrink_alpha) / _denominator(I, criterion.normalize)
        scored = _scored(g, criterion)
        if criterion.reduce == "FIRST":
            scored = scored[:1]
        for m in scored:
            w = params[m.param].detach()
            sl = w.narrow(m.axis, m.offset, g.size)
            a = sl.abs()
            d = p * torch.where(a > 0, a.pow(p - 1), torch.zeros_like(a)) * torch.sign(sl) / len(scored)
            shape = [1] * sl.dim()
            shape[m.axis] = g.size
            d = d * scale.to(d.dtype).reshape(shape)
            buf = out.setdefault(m.param, torch.zeros_like(w))
            buf.narrow(m.axis, m.offset, g.size).add_(d)
    return out


def sparsity_objective(params: ParamStore, groups: GroupIndex | list[PruningGroup], criterion: CriterionConfig) -> float:
    """Value of sum_k gamma_k * I_k / denom over prunable groups."""
    glist = groups.groups if isinstance(groups, GroupIndex) else groups
    total = 0.0
    for g in glist:
        if g.prunable:
            I = raw_importance(params, g, criterion)
            total += float((shrinkage_weights(I, criterion.shrink_alpha) * I / _denominator(I, criterion.normalize)).sum())
    return total


def group_scores(params: ParamStore, gi: GroupIndex, criterion: CriterionConfig) -> dict[int, torch.Tensor]:
    return {g.gid: importance_scores(params, g, criterion) for g in gi.groups if g.prunable}


def mean_group_score(params: ParamStore, gi: GroupIndex, criterion: CriterionConfig) -> float:
    """Mean raw importance over prunable dims; a sparsity proxy."""
    vals = [raw_importance(params, g, criterion) for g in gi.groups if g.prunable]
    return float(torch.cat(vals).mean()) if vals else 0.0


# ----------------------------------------------------------------- planning


def speed_up(origin_flops: float, pruned_flops: float) -> float:
    if pruned_flops <= 0 or origin_flops <= 0:
        raise ValueError("FLOP counts must be positive")
    return origin_flops / pruned_flops


def pruned_fraction(origin_flops: float, pruned_flops: float) -> float:
    return 1.0 - pruned_flops / origin_flops


def speed_up_from_fraction(fraction: float) -> float:
    if not 0 <= fraction < 1:
        raise ValueError("pruned fraction must lie in [0, 1)")
    return 1.0 / (1.0 - fraction)


@dataclass
class PrunePlan:
    spec_fingerprint: str
    removals: list[tuple[int, int, float]]  # (group id, dim, score)
    origin_flops: int
    predicted_flops: int
    predicted_params: int

    @property
    def speed_up(self) -> float:
        return speed_up(self.origin_flops, self.predicted_flops)

    def to_text(self) -> str:
        return json.dumps(
            {
                "spec_fingerprint": self.spec_fingerprint,
                "origin_flops": self.origin_flops,
                "predicted_flops": self.predicted_flops,
                "predicted_params": self.predicted_params,
                "removals": [{"group": g, "dim": d, "score": s} for g, d, s in self.removals],
            },
            indent=1,
        )

    @classmethod
    def from_text(cls, text: str) -> "PrunePlan":
        d = json.loads(text)
        return cls(
            d["spec_fingerprint"],
            [(r["group"], r["dim"], r["score"]) for r in d["removals"]],
            d["origin_flops"],
            d["predicted_flops"],
            d["predicted_params"],
        )


def max_speed_up(gi: GroupIndex) -> float:
    w = [g.size if not g.prunable else 1 for g in gi.groups]
    return speed_up(gi.flops(gi.widths()), gi.flops(w))


def _greedy(gi: GroupIndex, scores: dict[int, torch.Tensor], stop) -> tuple[list[tuple[int, int, float]], list[int]]:
    """Remove dims in ascending (score, group id, dim) order until ``stop(widths, n_removed)``."""
    widths = gi.widths()
    removals: list[tuple[int, int, float]] = []
    ranked = sorted((float(s), gid, k) for gid, sc in scores.items() for k, s in enumerate(sc.tolist()))
    for s, gid, k in ranked:
        if stop(widths, len(removals)):
            break
        if widths[gid] <= 1:
            continue
        widths[gid] -= 1
        removals.append((gid, k, s))
    return removals, widths


def plan_prune(
    spec: NetworkSpec,
    params: ParamStore,
    groups: GroupIndex | None,
    criterion: CriterionConfig,
    target_speed_up: float,
    scores: dict[int, torch.Tensor] | None = None,
) -> PrunePlan:
    """Greedy global removal of the lowest-scored dims until the target speed-up is met."""
    if target_speed_up < 1:
        raise ValueError("target speed-up must be >= 1")
    gi = groups or build_pruning_groups(spec)
    if gi.spec.fingerprint() != spec.fingerprint():
        raise PruneError("groups were built for a different spec")
    origin = gi.flops(gi.widths())
    if target_speed_up > 1:
        best = max_speed_up(gi)
        if best < target_speed_up:
            raise PruneError(f"target speed-up {target_speed_up:.4g} unreachable; max achievable is {best:.4g}")
    scores = scores if scores is not None else group_scores(params, gi, criterion)
    removals, widths = _greedy(gi, scores, lambda w, n: origin / gi.flops(w) >= target_speed_up)
    return PrunePlan(spec.fingerprint(), removals, origin, gi.flops(widths), gi.params(widths))


def plan_prune_count(
    spec: NetworkSpec, params: ParamStore, groups: GroupIndex | None, criterion: CriterionConfig, count: int
) -> PrunePlan:
    """Remove the ``count`` lowest-scored dims (fewer if width floors bind)."""
    gi = groups or build_pruning_groups(spec)
    origin = gi.flops(gi.widths())
    removals, widths = _greedy(gi, group_scores(params, gi, criterion), lambda w, n: n >= count)
    return PrunePlan(spec.fingerprint(), removals, origin, gi.flops(widths), gi.params(widths))


def removable_dims(gi: GroupIndex) -> int:
    return sum(g.size - 1 for g in gi.groups if g.prunable)


def _keep_indices(gi: GroupIndex, plan: PrunePlan) -> dict[int, torch.Tensor]:
    drop: dict[int, set[int]] = {}
    for gid, k, _ in plan.removals:
        if gid >= len(gi.groups):
            raise PruneError(f"plan references unknown group {gid}")
        g = gi.groups[gid]
        if not g.prunable:
            raise PruneError(f"plan removes dims of unprunable group {gid}")
        if not 0 <= k < g.size:
            raise PruneError(f"dim {k} out of range for group {gid} (size {g.size})")
        drop.setdefault(gid, set()).add(k)
    keep = {}
    for g in gi.groups:
        d = drop.get(g.gid, set())
        if len(d) >= g.size:
            raise PruneError(f"plan removes every dim of group {g.gid}")
        keep[g.gid] = torch.tensor([k for k in range(g.size) if k not in d], dtype=torch.long)
    return keep


def resize_spec(gi: GroupIndex, widths: list[int]) -> NetworkSpec:
    spec = gi.spec
    io = gi.layer_io

    def fix(layer: LayerSpec) -> LayerSpec:
        if layer.kind in ("linear", "conv2d", "classifier"):
            a, b = io[layer.name]
            return replace(layer, in_features=widths[a], out_features=widths[b])
        if layer.kind == "batchnorm":
            return replace(layer, in_features=widths[io[layer.name][0]])
        if layer.kind == "res_end" and layer.downsample is not None:
            return replace(layer, downsample=(fix(layer.downsample[0]), fix(layer.downsample[1])))
        if layer.kind == "mhsa":
            a, b = io[layer.name]
            return replace(
                layer, in_features=widths[a], out_features=widths[b], head_dims=tuple(widths[h] for h in gi.heads[layer.name])
            )
        return layer

    in_shape = spec.input_shape
    return NetworkSpec(tuple(fix(l) for l in spec.layers), in_shape, spec.num_classes, spec.arch)


def apply_prune(
    spec: NetworkSpec, params: ParamStore, plan: PrunePlan, groups: GroupIndex | None = None
) -> tuple[NetworkSpec, ParamStore]:
    """Physically slice every member tensor; returns a standalone smaller network."""
    gi = groups or build_pruning_groups(spec)
    if plan.spec_fingerprint != spec.fingerprint() or gi.spec.fingerprint() != spec.fingerprint():
        raise PruneError("plan does not belong to this spec")
    keep = _keep_indices(gi, plan)
    # (param, axis) -> [(offset, group)]
    touch: dict[tuple[str, int], list[tuple[int, int]]] = {}
    for g in gi.groups:
        for m in g.members:
            touch.setdefault((m.param, m.axis), []).append((m.offset, g.gid))
    out = {}
    for name, t in params.items():
        t = t.detach()
        for axis in range(t.dim()):
            segs = touch.get((name, axis))
            if not segs:
                continue
            idx = torch.cat([off + keep[g] for off, g in sorted(segs)])
            t = t.index_select(axis, idx)
        out[name] = t.clone()
    new_spec = resize_spec(gi, [len(keep[g.gid]) for g in gi.groups])
    return new_spec, out


def mask_dims(params: ParamStore, gi: GroupIndex, plan: PrunePlan) -> ParamStore:
    """Zero every trainable member slice of removed dims (buffers untouched)."""
    out = {k: v.detach().clone() for k, v in params.items()}
    for gid, k, _ in plan.removals:
        for m in gi.groups[gid].members:
            if not is_buffer(m.param):
                out[m.param].select(m.axis, m.offset + k).zero_()
    return out


# --------------------------------------------------------- unstructured / N:M


def prunable_weights(params: ParamStore) -> list[str]:
    return [k for k, v in params.items() if k.endswith(".weight") and v.dim() >= 2]


def unstructured_prune(
    params: ParamStore, keep_fraction: float, names: list[str] | None = None
) -> tuple[ParamStore, dict[str, torch.Tensor], float]:
    """Global magnitude threshold; returns (masked params, masks, surviving fraction)."""
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must be in (0, 1]")
    names = names or prunable_weights(params)
    flat = torch.cat([params[n].detach().reshape(-1).abs() for n in names])
    total = flat.numel()
    n_keep = int(round(keep_fraction * total))
    order = torch.sort(flat, descending=True, stable=True).indices
    keep = torch.zeros(total, dtype=torch.bool)
    keep[order[:n_keep]] = True
    out = {k: v.detach().clone() for k, v in params.items()}
    masks, start = {}, 0
    for n in names:
        c = params[n].numel()
        m = keep[start : start + c].reshape(params[n].shape).to(params[n].dtype)
        masks[n] = m
        out[n] = out[n] * m
        start += c
    return out, masks, n_keep / total


def nm_mask(weight: torch.Tensor, n: int, m: int) -> torch.Tensor:
    """Keep the top-n |w| of every m consecutive weights along the input axis.

    Rows are laid out with the input-channel axis last.  Ties keep the lower
    index; a trailing partial block of length r keeps ceil(n*r/m).
    """
    if n > m or n < 0 or m < 1:
        raise ValueError(f"invalid N:M pattern {n}:{m}")
    w = weight.detach()
    rows = w.movedim(1, -1).reshape(-1, w.shape[1]) if w.dim() >= 2 else w.reshape(1, -1)
    mask = torch.zeros_like(rows)
    length = rows.shape[1]
    for start in range(0, length, m):
        block = rows[:, start : start + m].abs()
        r = block.shape[1]
        keep = n if r == m else math.ceil(n * r / m)
        idx = torch.sort(block, dim=1, descending=True, stable=True).indices[:, :keep]
        mask[:, start : start + m] = torch.zeros_like(block).scatter(1, idx, 1.0)
    if w.dim() >= 2:
        shape = list(w.shape)
        moved = shape[:1] + shape[2:] + shape[1:2]
        return mask.reshape(moved).movedim(-1, 1).contiguous()
    return mask.reshape(w.shape)


def apply_masks(params: ParamStore, masks: dict[str, torch.Tensor]) -> ParamStore:
    return {k: (v * masks[k] if k in masks else v) for k, v in params.items()}


def nm_prune(params: ParamStore, n: int, m: int, names: list[str] | None = None):
    names = names or prunable_weights(params)
    masks = {k: nm_mask(params[k], n, m) for k in names}
    total = sum(params[k].numel() for k in names)
    kept = sum(int(v.sum()) for v in masks.values())
    return apply_masks(params, masks), masks, kept / total
