"""Reverse-mode automatic differentiation over numpy arrays.

Small vectorized tape: every op returns a new Tensor holding the result and
a closure that routes the output gradient to its parents. Gradients are only
accumulated into tensors that (transitively) require them. Arithmetic keeps
the array dtype, so the same graph code runs in float32 for training and in
float64 for finite-difference verification.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference, sampling)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- graph traversal ---------------------------------------------------

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(_toposort(self)):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _toposort(root: Tensor):
    order, seen = [], set()
    stack = [(root, iter(root._parents))]
    seen.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if id(p) not in seen and p._backward is not None:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs(*tensors) -> bool:
    return _GRAD_ENABLED and any(isinstance(t, Tensor) and t.requires_grad for t in tensors)


def _node(data, parents, backward) -> Tensor:
    out = Tensor(data)
    out.requires_grad = True
    out._parents = tuple(p for p in parents if isinstance(p, Tensor) and p.requires_grad)
    out._backward = backward
    return out


def _acc(t: Tensor, g):
    if isinstance(t, Tensor) and t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------------


def add(a, b):
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    data = (a.data if ta else a) + (b.data if tb else b)
    if not _needs(a, b):
        return Tensor(data)

    def backward(g):
        if ta:
            _acc(a, _unbroadcast(g, a.data.shape))
        if tb:
            _acc(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def sub(a, b):
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    data = (a.data if ta else a) - (b.data if tb else b)
    if not _needs(a, b):
        return Tensor(data)

    def backward(g):
        if ta:
            _acc(a, _unbroadcast(g, a.data.shape))
        if tb:
            _acc(b, _unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a, b):
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    av = a.data if ta else a
    bv = b.data if tb else b
    data = av * bv
    if not _needs(a, b):
        return Tensor(data)

    def backward(g):
        if ta:
            _acc(a, _unbroadcast(g * bv, a.data.shape))
        if tb:
            _acc(b, _unbroadcast(g * av, b.data.shape))

    return _node(data, (a, b), backward)


def div(a, b):
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    av = a.data if ta else a
    bv = b.data if tb else b
    data = av / bv
    if not _needs(a, b):
        return Tensor(data)

    def backward(g):
        if ta:
            _acc(a, _unbroadcast(g / bv, a.data.shape))
        if tb:
            _acc(b, _unbroadcast(-g * av / (bv * bv), b.data.shape))

    return _node(data, (a, b), backward)


def power(a, p: float):
    data = a.data**p
    if not _needs(a):
        return Tensor(data)

    def backward(g):
        _acc(a, g * p * a.data ** (p - 1))

    return _node(data, (a,), backward)


def exp(a):
    data = np.exp(a.data)
    if not _needs(a):
        return Tensor(data)

    def backward(g):
        _acc(a, g * data)

    return _node(data, (a,), backward)


def log(a):
    data = np.log(a.data)
    if not _needs(a):
        return Tensor(data)

    def backward(g):
        _acc(a, g / a.data)

    return _node(data, (a,), backward)


def sqrt(a):
    data = np.sqrt(a.data)
    if not _needs(a):
        return Tensor(data)

    def backward(g):
        _acc(a, g * 0.5 / data)

    return _node(data, (a,), backward)


def tanh(a):
    data = np.tanh(a.data)
    if not _needs(a):
        return Tensor(data)

    def backward(g):
        _acc(a, g * (1.0 - data * data))

    return _node(data, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a):
    """GELU, tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    data = 0.5 * x * (1.0 + t)
    if not _needs(a):
        return Tensor(data)

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        _acc(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _node(data, (a,), backward)


# -- shape -------------------------------------------------------------------


def reshape(a, shape):
    data = a.data.reshape(shape)
    if not _needs(a):
        return Tensor(data)

    def backward(g):
        _acc(a, g.reshape(a.data.shape))

    return _node(data, (a,), backward)


def transpose(a, axes):
    data = a.data.transpose(axes)
    if not _needs(a):
        return Tensor(data)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _acc(a, g.transpose(inv))

    return _node(data, (a,), backward)


def concat(tensors, axis=0):
    datas = [t.data for t in tensors]
    data = np.concatenate(datas, axis=axis)
    if not _needs(*tensors):
        return Tensor(data)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _acc(t, g[tuple(sl)])

    return _node(data, tuple(tensors), backward)


def take(a, idx):
    """Indexing / gather. Integer-array indices scatter-add on backward."""
    data = a.data[idx]
    if not _needs(a):
        return Tensor(data)

    def backward(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        _acc(a, acc)

    return _node(data, (a,), backward)


# -- reductions ----------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if not _needs(a):
        return Tensor(data)

    def backward(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.data.shape).copy())

    return _node(data, (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis, keepdims), 1.0 / n)


# -- matmul, softmax -----------------------------------------------------------


def matmul(a, b):
    """Matrix product with numpy broadcasting on leading axes (operands >= 2-D)."""
    data = np.matmul(a.data, b.data)
    if not _needs(a, b):
        return Tensor(data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _acc(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _acc(b, _unbroadcast(gb, b.data.shape))

    return _node(data, (a, b), backward)


def softmax(a, axis=-1):
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    data = e / e.sum(axis=axis, keepdims=True)
    if not _needs(a):
        return Tensor(data)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _acc(a, data * (g - dot))

    return _node(data, (a,), backward)


def log_softmax(a, axis=-1):
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    s = x - m
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    data = s - lse
    if not _needs(a):
        return Tensor(data)
    p = np.exp(data)

    def backward(g):
        _acc(a, g - p * g.sum(axis=axis, keepdims=True))

    return _node(data, (a,), backward)


# -- convolution ---------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=xp.dtype)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, :, ky, kx] = xp[:, :, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride]
    return cols


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0):
    """2-D convolution, NCHW input, OIHW weight, via im2col."""
    xv, wv = x.data, w.data
    bsz, cin, h, wd = xv.shape
    cout, _, kh, kw = wv.shape
    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    cols2 = cols.reshape(bsz, cin * kh * kw, oh * ow)
    w2 = wv.reshape(cout, cin * kh * kw)
    out = np.matmul(w2, cols2).reshape(bsz, cout, oh, ow)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
    if not _needs(x, w, b):
        return Tensor(out)

    def backward(g):
        g2 = g.reshape(bsz, cout, oh * ow)
        if w.requires_grad:
            gw = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(wv.shape)
            _acc(w, gw)
        if b is not None and b.requires_grad:
            _acc(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols2 = np.matmul(w2.T, g2)
            gcols = gcols2.reshape(bsz, cin, kh, kw, oh, ow)
            gxp = np.zeros_like(xp)
            for ky in range(kh):
                for kx in range(kw):
                    gxp[:, :, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride] += gcols[:, :, ky, kx]
            _acc(x, gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, backward)


def upsample_nearest_2x(x):
    data = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    if not _needs(x):
        return Tensor(data)
    b, c, h, w = x.data.shape

    def backward(g):
        _acc(x, g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _node(data, (x,), backward)
