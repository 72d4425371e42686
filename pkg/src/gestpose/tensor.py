"""Dense float32 tensors with reverse-mode automatic differentiation.

Every op builds a :class:`Node` recording its parents and a closure that maps
the upstream gradient to one gradient per parent. :func:`backward` walks the
graph in reverse topological order and accumulates (``+=``) into ``.grad``.

Binary elementwise ops accept equal shapes, or a scalar (python number or a
size-1 tensor) on either side. The only wider broadcast is :func:`add_bias`,
which adds a tensor matching a trailing suffix of the other operand's shape.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, LabelError, NumericError

DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    """Run ops at ``dtype`` inside the block; float64 serves gradient oracles."""
    global DTYPE
    prev = DTYPE
    DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = prev


@dataclass(eq=False)
class Node:
    op: str
    parents: tuple
    backward: Callable[[np.ndarray], Sequence]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, op, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), backward_fn)
    return out


def custom_op(data, parents, op, backward_fn):
    """Wrap ``data`` as the output of a user-defined op.

    ``backward_fn(g)`` must return one gradient (or None) per parent.
    """
    return _result(np.asarray(data, dtype=DTYPE), tuple(parents), op, backward_fn)


# ---------------------------------------------------------------- backward

def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(root):
    """Seed ``root`` with 1 and accumulate gradients into every reachable tensor."""
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    pending = {id(root): np.ones_like(root.data)}
    for t in reversed(_topo_order(root)):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        if t.grad is None:
            t.grad = np.array(g, dtype=DTYPE)
        else:
            t.grad += g
        if t.node is None:
            continue
        for p, pg in zip(t.node.parents, t.node.backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ContractError(
                    f"{t.node.op} backward produced {pg.shape} for parent {p.shape}")
            if id(p) in pending:
                pending[id(p)] = pending[id(p)] + pg
            else:
                pending[id(p)] = pg


# ---------------------------------------------------------------- elementwise

def _is_scalar_like(t):
    return t.data.size == 1 and t.ndim <= 1


def _binary(op, a, b, fwd, grad_a, grad_b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        mode = "same"
    elif _is_scalar_like(b):
        mode = "b_scalar"
    elif _is_scalar_like(a):
        mode = "a_scalar"
    else:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")
    ad = a.data if mode != "a_scalar" else a.data.reshape(())
    bd = b.data if mode != "b_scalar" else b.data.reshape(())
    out = fwd(ad, bd)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = grad_a(g, ad, bd)
            if mode == "a_scalar":
                ga = np.asarray(ga.sum(), dtype=DTYPE).reshape(a.shape)
        if b.requires_grad:
            gb = grad_b(g, ad, bd)
            if mode == "b_scalar":
                gb = np.asarray(gb.sum(), dtype=DTYPE).reshape(b.shape)
        return ga, gb

    return _result(out, (a, b), op, bw)


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: np.broadcast_to(g, np.broadcast(x, y).shape),
                   lambda g, x, y: np.broadcast_to(g, np.broadcast(x, y).shape))


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: np.broadcast_to(g, np.broadcast(x, y).shape),
                   lambda g, x, y: -g)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y,
                   lambda g, x, y: g * x)


def scale(x, factor, shift=None):
    """``x * factor + shift`` with constant factor/shift (scalars or last-axis vectors)."""
    x = as_tensor(x)
    f = np.asarray(factor, dtype=DTYPE)
    if f.ndim > 1 or (f.ndim == 1 and (x.ndim == 0 or f.shape[0] != x.shape[-1])):
        raise DimensionError(f"scale: factor {f.shape} does not fit {x.shape}")
    out = x.data * f
    if shift is not None:
        s = np.asarray(shift, dtype=DTYPE)
        if s.ndim > 1 or (s.ndim == 1 and s.shape[0] != x.shape[-1]):
            raise DimensionError(f"scale: shift {s.shape} does not fit {x.shape}")
        out = out + s
    return _result(out.astype(DTYPE, copy=False), (x,), "scale",
                   lambda g: (np.asarray(g * f, dtype=DTYPE),))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(DTYPE), (x,), "relu",
                   lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d ** 3)
    th = np.tanh(inner)
    out = 0.5 * d * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * d * (1.0 - th ** 2) * dinner),)

    return _result(out, (x,), "gelu", bw)


def sigmoid(x):
    x = as_tensor(x)
    s = (1.0 / (1.0 + np.exp(-x.data.astype(np.float64)))).astype(DTYPE)
    return _result(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def tabs(x):
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), "abs", lambda g: (g * sign,))


def square(x):
    x = as_tensor(x)
    return _result(x.data * x.data, (x,), "square", lambda g: (2.0 * g * x.data,))


def elementwise(kind, a, b=None):
    """Dispatch an elementwise op by name: add, sub, mul, relu, gelu, scale."""
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "relu":
        return relu(a)
    if kind == "gelu":
        return gelu(a)
    if kind == "scale":
        return scale(a, b)
    raise ContractError(f"unknown elementwise kind {kind!r}")


def add_bias(x, b):
    """Add ``b`` whose shape equals the trailing ``b.ndim`` axes of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"add_bias: {b.shape} is not a suffix of {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))

    def bw(g):
        return g, (g.sum(axis=lead) if lead else g)

    return _result(x.data + b.data, (x, b), "add_bias", bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """Matrix product over the last two axes.

    Supported forms: ``(..., m, k) @ (k, n)``, ``(m, k) @ (..., k, n)`` and
    ``(..., m, k) @ (..., k, n)`` with identical leading axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ in {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            if a.ndim == 2 and ga.ndim > 2:
                ga = ga.reshape(-1, *ga.shape[-2:]).sum(axis=0)
        if b.requires_grad:
            if b.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
                if b.ndim == 2 and gb.ndim > 2:
                    gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
        return ga, gb

    return _result(out, (a, b), "matmul", bw)


def cross(a, b):
    """Cross product along the last axis (extent 3)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.shape[-1] != 3:
        raise DimensionError(f"cross: need equal (...,3) shapes, got {a.shape}, {b.shape}")
    return _result(np.cross(a.data, b.data), (a, b), "cross",
                   lambda g: (np.cross(b.data, g), np.cross(g, a.data)))


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _result(np.asarray(out, dtype=DTYPE), (x,), "sum", bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / DTYPE(n), x.shape),)

    return _result(np.asarray(out, dtype=DTYPE), (x,), "mean", bw)


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _result(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), "transpose",
                   lambda g: (np.transpose(g, inv),))


def _is_fancy(index):
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def getitem(x, index):
    x = as_tensor(x)
    out = x.data[index]
    fancy = _is_fancy(index)

    def bw(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _result(np.array(out, dtype=DTYPE), (x,), "getitem", bw)


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
                t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: {t.shape} incompatible with {ref} on axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _result(np.concatenate([t.data for t in ts], axis=ax), ts, "concat", bw)


def stack(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise DimensionError(f"stack: {t.shape} differs from {ts[0].shape}")
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis % out.ndim

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return _result(out, ts, "stack", bw)


# ---------------------------------------------------------------- fused ops

def softmax(x, axis=-1):
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"softmax: axis {axis} out of range for rank {x.ndim}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax: non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), "softmax", bw)


def layernorm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layernorm: gain {gain.shape}/bias {bias.shape} vs last axis {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + DTYPE(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gb = g.sum(axis=lead)
        return gx, gg, gb

    return _result(out.astype(DTYPE), (x, gain, bias), "layernorm", bw)


def cross_entropy_logits(logits, labels):
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_logits: need [B, C] logits, got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise LabelError(f"{labels.shape[0]} labels for batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LabelError(f"labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return ((grad * (float(g) / n)).astype(DTYPE),)

    return _result(np.asarray(loss, dtype=DTYPE), (logits,), "cross_entropy", bw)


def avg_pool2d(x, k):
    """Average pool the last two axes with non-overlapping ``k x k`` windows."""
    x = as_tensor(x)
    *lead, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    out = x.data.reshape(*lead, h // k, k, w // k, k).mean(axis=(-3, -1))

    def bw(g):
        up = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1)
        return (up / DTYPE(k * k),)

    return _result(out.astype(DTYPE), (x,), "avg_pool2d", bw)


def bilinear_sample(feat, xy):
    """Sample ``feat`` [B, H, W, C] at continuous ``xy`` [B, J, 2] -> [B, J, C].

    ``x`` indexes W and ``y`` indexes H in continuous index space
    ``[0, W-1] x [0, H-1]``; coordinates outside are clamped to the edge and
    carry zero gradient.
    """
    feat, xy = as_tensor(feat), as_tensor(xy)
    if feat.ndim != 4 or xy.ndim != 3 or xy.shape[-1] != 2 or feat.shape[0] != xy.shape[0]:
        raise DimensionError(f"bilinear_sample: feat {feat.shape}, xy {xy.shape}")
    b, h, w, c = feat.shape
    x = xy.data[..., 0]
    y = xy.data[..., 1]
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(xc), max(w - 2, 0)).astype(np.int64)
    y0 = np.minimum(np.floor(yc), max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (xc - x0).astype(DTYPE)[..., None]
    wy = (yc - y0).astype(DTYPE)[..., None]
    bi = np.arange(b)[:, None]
    f00 = feat.data[bi, y0, x0]
    f01 = feat.data[bi, y0, x1]
    f10 = feat.data[bi, y1, x0]
    f11 = feat.data[bi, y1, x1]
    out = ((1 - wx) * (1 - wy) * f00 + wx * (1 - wy) * f01
           + (1 - wx) * wy * f10 + wx * wy * f11)
    inside_x = ((x >= 0) & (x <= w - 1)).astype(DTYPE)
    inside_y = ((y >= 0) & (y <= h - 1)).astype(DTYPE)

    def bw(g):
        gf = gxy = None
        if feat.requires_grad:
            gf = np.zeros(feat.shape, dtype=DTYPE)
            np.add.at(gf, (bi, y0, x0), g * (1 - wx) * (1 - wy))
            np.add.at(gf, (bi, y0, x1), g * wx * (1 - wy))
            np.add.at(gf, (bi, y1, x0), g * (1 - wx) * wy)
            np.add.at(gf, (bi, y1, x1), g * wx * wy)
        if xy.requires_grad:
            dx = ((1 - wy) * (f01 - f00) + wy * (f11 - f10)) * g
            dy = ((1 - wx) * (f10 - f00) + wx * (f11 - f01)) * g
            gxy = np.stack([dx.sum(-1) * inside_x, dy.sum(-1) * inside_y], axis=-1)
        return gf, gxy

    return _result(out.astype(DTYPE), (feat, xy), "bilinear_sample", bw)


def l1_loss(pred, target):
    """Mean absolute error against a constant target."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: prediction {pred.shape} vs target {target.shape}")
    return mean(tabs(sub(pred, Tensor(target))))
