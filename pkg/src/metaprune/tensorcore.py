"""Dense tensor primitives, reverse-mode gradients, optimizers and LR schedule.

Tensors are ``torch.Tensor`` objects on the CPU; the tape is torch's autograd
graph.  Everything here works in float32 by default.  ``float64_mode`` switches
the default dtype for finite-difference gradient checks.
"""
from __future__ import annotations

import contextlib
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, MutableMapping, Sequence

import torch
import torch.nn.functional as F

Tensor = torch.Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Raised when inputs to a primitive do not conform."""

    def __init__(self, primitive: str, message: str, *extents):
        self.primitive = primitive
        self.extents = extents
        detail = ", ".join(str(tuple(e)) for e in extents)
        super().__init__(f"{primitive}: {message}" + (f" (got {detail})" if detail else ""))


def configure_threads(n: int | None = None) -> int:
    """Cap intra-op parallelism; defaults to ``METAPRUNE_THREADS`` or 1."""
    if n is None:
        n = int(os.environ.get("METAPRUNE_THREADS", "1"))
    torch.set_num_threads(max(1, n))
    return torch.get_num_threads()


@contextlib.contextmanager
def float64_mode():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(prev)


# ---------------------------------------------------------------- primitives


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if weight.dim() != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear", "input features must equal weight columns", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("linear", "bias must have one entry per output", bias.shape, weight.shape)
    return F.linear(x, weight, bias)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.dim() != 4 or weight.dim() != 4:
        raise ShapeError("conv2d", "expected NCHW input and OIHW kernel", x.shape, weight.shape)
    if x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", "input channels must equal kernel in-channels", x.shape, weight.shape)
    kh, kw = weight.shape[2:]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ShapeError("conv2d", "kernel larger than padded input", x.shape, weight.shape)
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def batchnorm(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool = False,
    update_stats: bool = True,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Batch normalization over the channel axis (axis 1).

    In training mode batch statistics are used; when ``update_stats`` is set
    the running buffers are updated in place (unbiased variance).
    """
    c = x.shape[1]
    for name, t in (("weight", weight), ("bias", bias), ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError("batchnorm", f"{name} must have one entry per channel", x.shape, t.shape)
    if not training:
        if torch.any(running_var + eps <= 0):
            raise ShapeError("batchnorm", "variance + eps must be positive")
        return F.batch_norm(x, running_mean, running_var, weight, bias, False, 0.0, eps)
    if update_stats:
        return F.batch_norm(x, running_mean, running_var, weight, bias, True, momentum, eps)
    return F.batch_norm(x, None, None, weight, bias, True, 0.0, eps)


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", "operands must have equal shapes", a.shape, b.shape)
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("mul", "operands must have equal shapes", a.shape, b.shape)
    return a * b


def global_avg_pool(x: Tensor) -> Tensor:
    if x.dim() != 4:
        raise ShapeError("global_avg_pool", "expected NCHW input", x.shape)
    return x.mean(dim=(2, 3))


def softmax_cross_entropy(logits: Tensor, labels: Tensor) -> Tensor:
    if logits.dim() != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy", "expected (N, C) logits and (N,) labels", logits.shape, labels.shape)
    return F.cross_entropy(logits, labels)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, other)) if i != axis % len(ref)):
            raise ShapeError("concat", "non-concat extents must agree", tensors[0].shape, t.shape)
    return torch.cat(list(tensors), dim=axis)


def safe_sqrt(x: Tensor) -> Tensor:
    """sqrt with value and gradient 0 where ``x <= 0``."""
    pos = x > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, x, torch.ones_like(x))), torch.zeros_like(x))


def reduce(x: Tensor, op: str, axis: int = 0) -> Tensor:
    """MEAN / STD / MAX / MIN over ``axis``.  STD is the population std."""
    if x.shape[axis] == 0:
        raise ShapeError("reduce", "cannot reduce over an empty axis", x.shape)
    op = op.upper()
    if op == "MEAN":
        return x.mean(dim=axis)
    if op == "STD":
        mean = x.mean(dim=axis)
        var = (x * x).mean(dim=axis) - mean * mean
        return safe_sqrt(var)
    if op == "MAX":
        return x.amax(dim=axis)
    if op == "MIN":
        return x.amin(dim=axis)
    raise ValueError(f"reduce: unknown op {op!r}")


_PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "linear": linear,
    "conv2d": conv2d,
    "batchnorm": batchnorm,
    "relu": relu,
    "add": add,
    "mul": mul,
    "global_avg_pool": global_avg_pool,
    "softmax_cross_entropy": softmax_cross_entropy,
    "concat": lambda *ts, axis=-1: concat(ts, axis),
    "reduce": reduce,
}

PRIMITIVE_KINDS = tuple(_PRIMITIVES)


def eval_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **attrs)


# ----------------------------------------------------------------- gradients


def gradients(loss: Tensor, wrt: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Reverse-mode gradients of a scalar ``loss``; unused entries get zeros."""
    if loss.numel() != 1:
        raise ValueError(f"gradients: loss must be scalar, got shape {tuple(loss.shape)}")
    names = list(wrt)
    tensors = [wrt[n] for n in names]
    if not loss.requires_grad:
        return {n: torch.zeros_like(t) for n, t in zip(names, tensors)}
    needs = [t.requires_grad for t in tensors]
    live = [t for t, r in zip(tensors, needs) if r]
    grads = iter(torch.autograd.grad(loss.reshape(()), live, allow_unused=True) if live else ())
    out = {}
    for n, t, r in zip(names, tensors, needs):
        g = next(grads) if r else None
        out[n] = torch.zeros_like(t) if g is None else g
    return out


def finite_difference(fn: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-5) -> dict[str, Tensor]:
    """Central differences of scalar ``fn()`` w.r.t. each tensor in ``params`` (perturbed in place)."""
    out = {}
    with torch.no_grad():
        for name, p in params.items():
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            out[name] = g
    return out


def max_relative_error(a: Mapping[str, Tensor], b: Mapping[str, Tensor], floor: float = 1e-6) -> float:
    worst = 0.0
    for k in a:
        diff = (a[k] - b[k]).abs()
        scale = torch.maximum(a[k].abs(), b[k].abs()).clamp_min(floor)
        if diff.numel():
            worst = max(worst, float((diff / scale).max()))
    return worst


# ---------------------------------------------------------------- optimizers


@dataclass
class OptimState:
    kind: str  # "sgd" | "adamw"
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    buffers: dict[str, dict[str, Tensor]] = field(default_factory=dict)


def sgd_state(lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> OptimState:
    return OptimState("sgd", lr=lr, momentum=momentum, weight_decay=weight_decay)


def adamw_state(
    lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0
) -> OptimState:
    return OptimState("adamw", lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)


def _check_keys(params: Mapping[str, Tensor], grads: Mapping[str, Tensor]) -> None:
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise KeyError(f"gradient keys do not match parameter keys: {missing[:5]}")


@torch.no_grad()
def sgd_step(state: OptimState, params: MutableMapping[str, Tensor], grads: Mapping[str, Tensor]):
    """SGD with momentum and coupled weight decay; updates ``params`` in place."""
    _check_keys(params, grads)
    for name, w in params.items():
        g = grads[name]
        if state.weight_decay:
            g = g + state.weight_decay * w
        if state.momentum:
            buf = state.buffers.setdefault(name, {})
            v = buf.get("momentum")
            if v is None:
                v = buf["momentum"] = g.clone()
            else:
                v.mul_(state.momentum).add_(g)
            g = v
        w.sub_(state.lr * g)
    state.step += 1
    return params


@torch.no_grad()
def adamw_step(state: OptimState, params: MutableMapping[str, Tensor], grads: Mapping[str, Tensor]):
    """AdamW with bias correction and decoupled weight decay; in place."""
    _check_keys(params, grads)
    state.step += 1
    b1, b2 = state.betas
    corr1 = 1 - b1**state.step
    corr2 = 1 - b2**state.step
    for name, w in params.items():
        g = grads[name]
        buf = state.buffers.setdefault(name, {})
        if "exp_avg" not in buf:
            buf["exp_avg"] = torch.zeros_like(w)
            buf["exp_avg_sq"] = torch.zeros_like(w)
        m, v = buf["exp_avg"], buf["exp_avg_sq"]
        if state.weight_decay:
            w.mul_(1 - state.lr * state.weight_decay)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v.sqrt() / math.sqrt(corr2)).add_(state.eps)
        w.addcdiv_(m, denom, value=-state.lr / corr1)
    return params


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1

    def __post_init__(self):
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing: {ms}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        object.__setattr__(self, "milestones", ms)


def lr_at_epoch(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    passed = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.base_lr * schedule.gamma**passed


def named_leaves(tensors: Iterable[tuple[str, Tensor]]) -> dict[str, Tensor]:
    return {n: t.detach().clone().requires_grad_(True) for n, t in tensors}
