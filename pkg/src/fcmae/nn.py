"""Minimal dense-tensor kernel: reverse-mode autodiff, transformer blocks,
AdamW, and the warmup-cosine learning-rate schedule.

Tensors wrap numpy arrays (float64 by default; float32 is an opt-in speed
mode) and record a dynamic computation graph.  ``backward`` on a scalar
loss accumulates gradients into every reachable tensor created with
``requires_grad=True``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import DataError


class Tensor:
    """Graph node holding a value, an optional gradient, and its VJP."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return reduce_sum(self, axis=axis)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over the axes numpy broadcasting added or stretched."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor in the graph."""
    if loss.data.size != 1:
        raise DataError("backward requires a scalar loss")
    if not loss.requires_grad:
        raise DataError("backward without a recorded forward pass")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            # gradient buffers are never mutated in place, so views may be shared
            parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# primitive operations

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy's stacked-batch broadcasting; inputs >= 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DataError("matmul requires tensors with at least 2 dimensions")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _node(a.data @ b.data, (a, b), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(
        np.broadcast_to(a.data, shape).copy(),
        (a,),
        lambda g: (_unbroadcast(g, a.data.shape),),
    )


def take(a, indices, axis: int = 0) -> Tensor:
    """Select positions along one axis (same index set for all other axes)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(np.moveaxis(ga, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (ga,)

    return _node(np.take(a.data, idx, axis=axis), (a,), vjp)


def gather_rows(a, indices) -> Tensor:
    """Per-batch row selection: a is (B, N, D), indices (B, K) -> (B, K, D)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.data.ndim != 3 or idx.ndim != 2 or idx.shape[0] != a.data.shape[0]:
        raise DataError("gather_rows expects (B, N, D) data and (B, K) indices")
    bidx = np.arange(idx.shape[0])[:, None]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (bidx, idx), g)
        return (ga,)

    return _node(a.data[bidx, idx], (a,), vjp)


def scatter_rows(base, indices, src) -> Tensor:
    """Per-batch row replacement: base (B, N, D) with src (B, K, D) at indices (B, K)."""
    base, src = as_tensor(base), as_tensor(src)
    idx = np.asarray(indices, dtype=np.int64)
    if base.data.ndim != 3 or idx.shape != src.data.shape[:2]:
        raise DataError("scatter_rows expects (B, N, D) base, (B, K) indices, (B, K, D) src")
    bidx = np.arange(idx.shape[0])[:, None]
    out = base.data.copy()
    out[bidx, idx] = src.data

    def vjp(g):
        gb = g.copy()
        gb[bidx, idx] = 0.0
        return gb, g[bidx, idx]

    return _node(out, (base, src), vjp)


def gelu(a) -> Tensor:
    """Exact GELU: 0.5 x (1 + erf(x / sqrt(2)))."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return _node(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def softmax_rows(a) -> Tensor:
    """Softmax along the last axis (rows of a matrix, per-head attention rows)."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _node(s, (a,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def vjp(g):
        h = g * gain.data
        gx = inv * (h - h.mean(axis=-1, keepdims=True)
                    - xhat * (h * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _node(xhat * gain.data + bias.data, (x, gain, bias), vjp)


def mse(pred, target) -> Tensor:
    """Mean over all entries of the squared difference."""
    pred, target = as_tensor(pred), as_tensor(target)
    diff = pred.data - target.data
    n = diff.size

    def vjp(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return _node(np.float64(np.mean(diff * diff)), (pred, target), vjp)


def multi_head_attention(x, wq, bq, wk, bk, wv, bv, wo, bo, n_heads: int) -> Tensor:
    """Self-attention over the token axis: queries = keys = values = x.

    Accepts (n, d) or batched (B, n, d); heads have width d / n_heads.
    """
    x = as_tensor(x)
    squeeze = x.data.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.data.shape)
    b, n, d = x.data.shape
    if d % n_heads != 0:
        raise DataError(f"model width {d} not divisible by {n_heads} heads")
    dh = d // n_heads

    def split(t):
        return transpose(reshape(t, (b, n, n_heads, dh)), (0, 2, 1, 3))

    q = split(add(matmul(x, wq), bq))
    k = split(add(matmul(x, wk), bk))
    v = split(add(matmul(x, wv), bv))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = softmax_rows(scores)
    ctx = matmul(attn, v)
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    out = add(matmul(merged, wo), bo)
    if squeeze:
        out = reshape(out, (n, d))
    return out


# ---------------------------------------------------------------------------
# parameters and optimization

class ParameterStore:
    """Named learnable tensors with gradient slots."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array) -> Tensor:
        if name in self._params:
            raise DataError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(array, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def register(self, name: str, tensor: Tensor) -> Tensor:
        """Adopt an existing tensor (e.g. tokenizer parameters) under a name."""
        if name in self._params:
            raise DataError(f"duplicate parameter name: {name}")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam: p <- p - lr * (m_hat/(sqrt(v_hat)+eps) + wd*p)."""

    lr: float = 1e-2
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, store: ParameterStore) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in store.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise DataError(f"gradient shape mismatch for {name}")
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p.data = p.data - self.lr * (
                m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            )


@dataclass(frozen=True)
class LRSchedule:
    """Linear warmup to base_lr, then cosine decay to zero."""

    base_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise DataError("require 0 <= warmup_steps < total_steps")

    def at(self, step: int) -> float:
        if not 0 <= step <= self.total_steps:
            raise DataError(f"step {step} outside [0, {self.total_steps}]")
        if step < self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        span = self.total_steps - self.warmup_steps
        frac = (step - self.warmup_steps) / span
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
