"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds a node holding its parents and a closure mapping the output
gradient to one gradient per parent. ``backward`` walks the graph in reverse
topological order. Shapes are explicit: binary elementwise ops require equal
shapes, except that a Python scalar may be combined with any tensor. Axis
contractions and expansions go through :func:`einsum`.
"""
from __future__ import annotations

import string
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Input lies where the op is undefined (e.g. normalizing a zero vector)."""


class DomainError(ValueError):
    """Input outside the mathematical domain of the op."""


class ContractError(RuntimeError):
    """A caller broke an op's precondition."""


GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: GradFn | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar; semantics live in the module-level functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: GradFn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._grad_fn = grad_fn
    else:
        out._parents = ()
        out._grad_fn = None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return _make(a.data + c, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    a = as_tensor(a)
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(as_tensor(a), b)
    if not isinstance(a, Tensor):
        return scale(b, a)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        bad = float(a.data[a.data <= 0.0].flat[0])
        raise DomainError(f"log of non-positive value {bad!r}")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))
    ax = axis % a.ndim

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _make(a.data.sum(axis=ax), (a,), grad_fn)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: needs two equal-length vectors, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(np.asarray(ad @ bd), (a, b), lambda g: (g * bd, g * ad))


# ---------------------------------------------------------------- shape / linear algebra


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expects a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T.copy(),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mixed shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    n = len(tensors)

    def grad_fn(g):
        return tuple(np.take(g, i, axis=ax) for i in range(n))

    return _make(out, tuple(tensors), grad_fn)


def _parse_einsum(spec: str, n_operands: int) -> tuple[list[str], str]:
    if "->" not in spec:
        raise ContractError(f"einsum spec {spec!r} needs an explicit '->' output")
    lhs, out = spec.replace(" ", "").split("->")
    ins = lhs.split(",")
    if len(ins) != n_operands:
        raise ContractError(f"einsum spec {spec!r} names {len(ins)} operands, got {n_operands}")
    for labels in ins + [out]:
        if len(set(labels)) != len(labels) or not set(labels) <= set(string.ascii_letters):
            raise ContractError(f"einsum spec {spec!r}: labels must be distinct letters per operand")
    if not set(out) <= set("".join(ins)):
        raise ContractError(f"einsum spec {spec!r}: output label missing from inputs")
    return ins, out


def einsum(spec: str, *operands: Tensor) -> Tensor:
    """Differentiable ``np.einsum`` restricted to distinct labels per operand.

    The gradient for operand ``i`` is itself an einsum of the output gradient
    with the other operands; labels summed out of operand ``i`` alone are
    re-expanded by broadcasting.
    """
    operands = tuple(as_tensor(t) for t in operands)
    ins, out = _parse_einsum(spec, len(operands))
    for labels, t in zip(ins, operands):
        if len(labels) != t.ndim:
            raise ShapeError(f"einsum: labels {labels!r} do not fit operand of shape {t.shape}")
    datas = [t.data for t in operands]
    try:
        result = np.einsum(spec, *datas)
    except ValueError as exc:
        raise ShapeError(f"einsum {spec!r}: {exc}") from exc

    def grad_fn(g):
        grads = []
        for i, (labels, t) in enumerate(zip(ins, operands)):
            if not t.requires_grad:
                grads.append(None)
                continue
            other_labels = [out] + [ins[j] for j in range(len(ins)) if j != i]
            other_data = [g] + [datas[j] for j in range(len(ins)) if j != i]
            avail = set("".join(other_labels))
            kept = "".join(c for c in labels if c in avail)
            gi = np.einsum(",".join(other_labels) + "->" + kept, *other_data)
            if kept != labels:
                for pos, c in enumerate(labels):
                    if c not in avail:
                        gi = np.expand_dims(gi, pos)
                gi = np.broadcast_to(gi, t.shape).copy()
            grads.append(gi)
        return tuple(grads)

    return _make(np.asarray(result, dtype=np.float64), operands, grad_fn)


# ---------------------------------------------------------------- composite numerics


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    ax = axis % v.ndim
    shifted = v.data - v.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _make(out, (v,), grad_fn)


def l2_normalize(v: Tensor, axis: int = -1, eps: float | None = None) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm.

    With ``eps=None`` a zero-norm slice raises. With ``eps`` set, norms are
    clamped from below at ``eps`` instead (zero vectors map to zero).
    """
    ax = axis % v.ndim
    norm = np.sqrt((v.data * v.data).sum(axis=ax, keepdims=True))
    if eps is None:
        if np.any(norm == 0.0):
            raise DegenerateInputError("l2_normalize: zero-norm input")
        denom = norm
        clamped = np.zeros_like(norm, dtype=bool)
    else:
        clamped = norm < eps
        denom = np.where(clamped, eps, norm)
    out = v.data / denom

    def grad_fn(g):
        radial = out * (g * out).sum(axis=ax, keepdims=True)
        return (np.where(clamped, g, g - radial) / denom,)

    return _make(out, (v,), grad_fn)


def logsumexp(v: Tensor, axis: int = -1, mask: np.ndarray | None = None,
              extra: float = 0.0) -> Tensor:
    """``log(sum_{mask} exp(v) + extra)`` along ``axis``, computed stably.

    ``mask`` (boolean, same shape as ``v``) selects the summed entries; all
    are summed when it is None. ``extra`` is a non-negative constant added
    inside the log.
    """
    if extra < 0:
        raise DomainError(f"logsumexp: extra must be non-negative, got {extra}")
    ax = axis % v.ndim
    keep = np.ones(v.shape, dtype=bool) if mask is None else np.broadcast_to(mask, v.shape).astype(bool)
    masked = np.where(keep, v.data, -np.inf)
    top = masked.max(axis=ax, keepdims=True)
    if extra > 0:
        top = np.maximum(top, np.log(extra))
    if np.any(np.isneginf(top)):
        raise DomainError("logsumexp: empty selection with extra = 0")
    total = np.where(keep, np.exp(masked - top), 0.0).sum(axis=ax, keepdims=True)
    if extra > 0:
        total = total + extra * np.exp(-top)
    out_k = top + np.log(total)
    weights = np.where(keep, np.exp(masked - out_k), 0.0)

    def grad_fn(g):
        return (np.expand_dims(g, ax) * weights,)

    return _make(np.squeeze(out_k, axis=ax), (v,), grad_fn)


def softplus(v: Tensor) -> Tensor:
    """``log(1 + exp(v))`` without overflow or loss of small values."""
    x = v.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0, e) / (1.0 + e)
    return _make(out, (v,), lambda g: (g * sig,))


def log_softmax(v: Tensor, axis: int = -1) -> Tensor:
    ax = axis % v.ndim
    shifted = v.data - v.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def grad_fn(g):
        return (g - probs * g.sum(axis=ax, keepdims=True),)

    return _make(out, (v,), grad_fn)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood of integer ``target`` under softmax(logits).

    ``logits`` is either a class vector with a scalar target, or a
    ``(batch, classes)`` matrix with one target per row.
    """
    tgt = np.asarray(target, dtype=np.int64)
    if logits.ndim == 1:
        if tgt.ndim != 0:
            raise ShapeError("cross_entropy: vector logits take a scalar target")
        return cross_entropy(reshape(logits, (1, logits.shape[0])), tgt.reshape(1))
    if logits.ndim != 2 or tgt.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {tgt.shape}")
    n_classes = logits.shape[1]
    if tgt.size and (tgt.min() < 0 or tgt.max() >= n_classes):
        raise ShapeError(f"cross_entropy: target outside [0, {n_classes})")
    batch = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(batch)
    loss = -logp[rows, tgt].mean()

    def grad_fn(g):
        d = np.exp(logp)
        d[rows, tgt] -= 1.0
        return (d * (float(g) / batch),)

    return _make(np.asarray(loss), (logits,), grad_fn)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dt into ``t.grad`` for every reachable grad-requiring t."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward on a tensor that does not require grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` with respect to ``param.data``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn().item()
        flat[i] = orig - step
        down = fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
              floor: float = 1e-8) -> float:
    """Worst relative error between backward() and finite differences over ``params``."""
    for p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, max_relative_error(analytic, numeric_grad(fn, p, step), floor))
    return worst
