"""Small reverse-mode automatic differentiation over float64 numpy arrays.

A ``Tensor`` records the operation that produced it and a closure mapping
the output gradient to parent gradients. ``backward`` walks the graph in
reverse topological order. The graph is rebuilt on every forward pass.

Example:
    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> (x * x).sum().backward()
    >>> x.grad.tolist()
    [2.0, 4.0, 6.0]
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"
        self.name = name

    # construction helpers

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out.op = op
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # arithmetic

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, reciprocal(as_tensor(other)))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Populate ``.grad`` of every leaf that requires it; leaf gradients accumulate."""
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return Tensor._make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return Tensor._make(a.data * b.data, (a, b),
                        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def reciprocal(a: Tensor) -> Tensor:
    r = 1.0 / a.data
    return Tensor._make(r, (a,), lambda g: (-g * r * r,), "reciprocal")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return Tensor._make(e, (a,), lambda g: (g * e,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    r = np.sqrt(a.data)
    return Tensor._make(r, (a,), lambda g: (g * 0.5 / r,), "sqrt")


def square(a: Tensor) -> Tensor:
    return Tensor._make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return Tensor._make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); the gradient is zero where the floor is active."""
    keep = a.data > floor
    return Tensor._make(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,), "clamp_min")


def where(cond, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    c = np.asarray(cond, dtype=bool)
    return Tensor._make(np.where(c, a.data, b.data), (a, b),
                        lambda g: (_unbroadcast(np.where(c, g, 0.0), a.shape), _unbroadcast(np.where(c, 0.0, g), b.shape)),
                        "where")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return Tensor._make(out, (a,), bw, "gelu")


# reductions and shape ops

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def tmin(a: Tensor, axis: int = -1) -> Tensor:
    """Minimum along ``axis``; the gradient flows to the first minimizing entry."""
    idx = np.argmin(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return Tensor._make(out, (a,), bw, "min")


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return Tensor._make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)


def index(a: Tensor, idx) -> Tensor:
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g  # basic indexing never repeats an element
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(a.data[idx], (a,), bw, "index")


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return Tensor._make(out, ts, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    out = np.stack([t.data for t in ts], axis=axis)
    return Tensor._make(out, ts, lambda g: tuple(np.moveaxis(g, axis, 0)), "stack")


# linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes with broadcasting of leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            # shared weight matrix: fold the leading axes into one product
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._make(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# normalization and probability

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (a,), bw, "log_softmax")


def layer_norm(a: Tensor, gain: Optional[Tensor] = None, bias: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        return (inv / n * (n * g - g.sum(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True)),)

    out = Tensor._make(xhat, (a,), bw, "layer_norm")
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor._make(table.data[ids], (table,), bw, "embedding")


def cross_entropy(logits: Tensor, labels, mask=None, reduce: str = "mean") -> Tensor:
    """Cross-entropy of integer ``labels`` under ``logits`` (classes on the last axis).

    ``reduce`` is "mean" over unmasked rows, "sum", or "none" (per-row values).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[:-1] != labels.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} do not match labels {labels.shape}")
    lp = log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    per = neg(tsum(mul(lp, onehot), axis=-1))
    if mask is not None:
        per = mul(per, np.asarray(mask, dtype=np.float64))
    if reduce == "none":
        return per
    if reduce == "sum":
        return tsum(per)
    denom = float(np.sum(mask)) if mask is not None else float(labels.size)
    return tsum(per) * (1.0 / max(denom, 1.0))


def mse(a: Tensor, b) -> Tensor:
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    d = a - b
    return mean(mul(d, d))


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    x = a.data
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)
    u = x / n

    def bw(g):
        return ((g - u * (g * u).sum(axis=-1, keepdims=True)) / n,)

    return Tensor._make(u, (a,), bw, "l2_normalize")


def angle_between(u: Tensor, v) -> Tensor:
    """Geodesic angle between 3-vectors on the last axis, via atan2(|u x v|, u.v)."""
    v = as_tensor(v)
    a, b = u.data, v.data
    c = np.cross(a, b)
    s = np.sqrt((c * c).sum(axis=-1))
    d = (a * b).sum(axis=-1)
    out = np.arctan2(s, d)

    def bw(g):
        r2 = s * s + d * d
        safe_s = np.where(s > 0, s, 1.0)
        safe_r2 = np.where(r2 > 0, r2, 1.0)
        # d(atan2(s, d)) = (d ds - s dd) / (s^2 + d^2)
        coef_s = np.where(s > 0, d / safe_r2, 0.0)[..., None]
        coef_d = (-s / safe_r2)[..., None]
        chat = c / safe_s[..., None]
        gu = coef_s * np.cross(b, chat) + coef_d * b
        gv = coef_s * np.cross(chat, a) + coef_d * a
        gg = g[..., None]
        return _unbroadcast(gg * gu, u.shape), _unbroadcast(gg * gv, v.shape)

    return Tensor._make(out, (u, v), bw, "angle_between")


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, keep)


# optimization

@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: Optional[float] = None) -> None:
    """One bias-corrected Adam update, in place on ``params`` (name -> Tensor)."""
    lr = state.lr if lr is None else lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam: gradient {g.shape} does not match parameter {name} {p.data.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return total


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Largest relative error between backprop and central-difference gradients of ``f`` at ``x``.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    x.grad = None
    x.requires_grad = True
    f(x).backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    base = x.data.copy()
    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            xp = base.copy().reshape(-1)
            xp[i] += h
            x.data = xp.reshape(base.shape)
            fp = f(x).item()
            xm = base.copy().reshape(-1)
            xm[i] -= h
            x.data = xm.reshape(base.shape)
            fm = f(x).item()
            flat[i] = (fp - fm) / (2.0 * h)
    x.data = base
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0


def parameters_grads(params: dict) -> dict:
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
