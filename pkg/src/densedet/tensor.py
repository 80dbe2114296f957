"""A small reverse-mode autodiff engine over numpy arrays.

Every op builds a closure that knows how to push the upstream gradient to its
parents; ``backward`` walks the graph in reverse topological order.  There is
no graph reuse, no in-place mutation of tracked tensors, and no implicit
dtype promotion: an expression stays in whatever float dtype its inputs use.

Only what the detector needs is implemented.  Convolution goes through
:mod:`densedet.kernels` (im2col + gemm).
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

from . import kernels

FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference, EMA, decode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    """Dense n-d array plus optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _pair(a, b):
    """Wrap operands; bare python scalars adopt the other operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.isscalar(b):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor) and np.isscalar(a):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return as_tensor(a), as_tensor(b)


def _result(data, parents, backward_fn):
    """Wrap an op result; keep the graph only when it can matter."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss):
    """Reverse-accumulate d(loss)/d(leaf) into ``.grad`` of every leaf."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tracked parameter")

    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate(node, g)
            continue
        for parent, pg in node._backward(g):
            if not parent.requires_grad:
                continue
            if parent._backward is None and not parent._parents:
                _accumulate(parent, pg)
            else:
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    data = a.data + b.data

    def bwd(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return _result(data, (a, b), bwd)


def sub(a, b):
    a, b = _pair(a, b)
    data = a.data - b.data

    def bwd(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape)))

    return _result(data, (a, b), bwd)


def mul(a, b):
    a, b = _pair(a, b)
    data = a.data * b.data

    def bwd(g):
        return (
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        )

    return _result(data, (a, b), bwd)


def relu(x):
    x = as_tensor(x)
    data = np.maximum(x.data, 0)

    def bwd(g):
        return ((x, g * (x.data > 0)),)

    return _result(data, (x,), bwd)


def sigmoid(x):
    x = as_tensor(x)
    # split by sign so exp never overflows
    data = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                    np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
    data = data.astype(x.data.dtype, copy=False)

    def bwd(g):
        return ((x, g * data * (1.0 - data)),)

    return _result(data, (x,), bwd)


def exp(x):
    x = as_tensor(x)
    data = np.exp(x.data)

    def bwd(g):
        return ((x, g * data),)

    return _result(data, (x,), bwd)


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        bad = float(np.min(x.data))
        raise ValueError(f"log domain error: min operand value {bad} <= 0")
    data = np.log(x.data)

    def bwd(g):
        return ((x, g / x.data),)

    return _result(data, (x,), bwd)


def sqrt(x):
    x = as_tensor(x)
    if np.any(x.data < 0):
        bad = float(np.min(x.data))
        raise ValueError(f"sqrt domain error: min operand value {bad} < 0")
    data = np.sqrt(x.data)

    def bwd(g):
        denom = np.maximum(data, np.finfo(data.dtype).tiny)
        return ((x, g * 0.5 / denom),)

    return _result(data, (x,), bwd)


def powc(x, exponent):
    """x ** c for a python-float exponent; x must be non-negative."""
    x = as_tensor(x)
    c = float(exponent)
    if np.any(x.data < 0):
        raise ValueError("powc domain error: negative base with real exponent")
    data = np.power(x.data, c)

    def bwd(g):
        base = np.maximum(x.data, np.finfo(x.data.dtype).tiny)
        return ((x, g * c * np.power(base, c - 1.0)),)

    return _result(data, (x,), bwd)


def reciprocal(x):
    x = as_tensor(x)
    data = 1.0 / x.data

    def bwd(g):
        return ((x, -g * data * data),)

    return _result(data, (x,), bwd)


def minimum(a, b):
    a, b = _pair(a, b)
    data = np.minimum(a.data, b.data)

    def bwd(g):
        take_a = a.data <= b.data  # ties route to the first argument
        return (
            (a, _unbroadcast(g * take_a, a.data.shape)),
            (b, _unbroadcast(g * ~take_a, b.data.shape)),
        )

    return _result(data, (a, b), bwd)


def maximum(a, b):
    a, b = _pair(a, b)
    data = np.maximum(a.data, b.data)

    def bwd(g):
        take_a = a.data >= b.data
        return (
            (a, _unbroadcast(g * take_a, a.data.shape)),
            (b, _unbroadcast(g * ~take_a, b.data.shape)),
        )

    return _result(data, (a, b), bwd)


def clip(x, lo, hi):
    return minimum(maximum(x, lo), hi)


# ---------------------------------------------------------------------------
# reductions / shape
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    return tuple(sorted(a % ndim for a in axis))


def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.data.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return ((x, np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False)),)

    return _result(data, (x,), bwd)


def reduce_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.data.ndim)
    count = int(np.prod([x.data.shape[a] for a in axes])) if x.data.ndim else 1
    if count == 0:
        raise ValueError("mean over an empty axis is undefined")
    return mul(reduce_sum(x, axis, keepdims), 1.0 / count)


def reduce_max(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.data.ndim)
    data = x.data.max(axis=axes, keepdims=True)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        mask = (x.data == data)
        counts = mask.sum(axis=axes, keepdims=True)
        return ((x, np.broadcast_to(g / counts, x.data.shape) * mask),)

    out = data if keepdims else data.squeeze(axis=axes)
    return _result(out, (x,), bwd)


def reshape(x, shape):
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def bwd(g):
        return ((x, g.reshape(x.data.shape)),)

    return _result(data, (x,), bwd)


def narrow(x, axis, start, length):
    """Contiguous slice of ``length`` entries along ``axis``."""
    x = as_tensor(x)
    ax = axis % x.data.ndim
    n = x.data.shape[ax]
    if start < 0 or length < 1 or start + length > n:
        raise ValueError(f"narrow [{start}:{start + length}] out of range for axis of size {n}")
    sel = tuple(slice(None) if i != ax else slice(start, start + length)
                for i in range(x.data.ndim))
    data = np.ascontiguousarray(x.data[sel])

    def bwd(g):
        full = np.zeros_like(x.data)
        full[sel] = g
        return ((x, full),)

    return _result(data, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors][:-1])

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(zip(tensors, parts))

    return _result(data, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# conv / norm / resampling
# ---------------------------------------------------------------------------

def conv2d(x, w, b=None, stride=1, padding=0):
    """2-d cross-correlation; x [n,c,h,w], w [oc,c,kh,kw], optional bias [oc]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d wants 4-d input and kernel, got {x.data.shape} and {w.data.shape}")
    n, c, h, wdt = x.data.shape
    oc, wc, kh, kw = w.data.shape
    if wc != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {wc}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d bad geometry: stride={stride} padding={padding}")
    oh = kernels.conv_out_size(h, kh, stride, padding)
    ow = kernels.conv_out_size(wdt, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv2d output would be empty for input {x.data.shape} kernel {w.data.shape}")

    cols = kernels.im2col(x.data, kh, kw, stride, padding)  # [n, oh*ow, c*kh*kw]
    wmat = w.data.reshape(oc, c * kh * kw)
    out = cols @ wmat.T  # [n, oh*ow, oc]
    out = out.transpose(0, 2, 1).reshape(n, oc, oh, ow)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (oc,):
            raise ValueError(f"conv2d bias shape {b.data.shape} does not match {oc} output channels")
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n, oh * ow, oc)
        grad_w = np.tensordot(gmat, cols, axes=([0, 1], [0, 1])).reshape(w.data.shape)
        grad_cols = gmat @ wmat
        grad_x = kernels.col2im(np.ascontiguousarray(grad_cols), c, h, wdt, kh, kw, stride, padding)
        grads = [(x, grad_x), (w, grad_w)]
        if b is not None:
            grads.append((b, g.sum(axis=(0, 2, 3))))
        return tuple(grads)

    return _result(np.ascontiguousarray(out), tuple(parents), bwd)


def group_norm(x, groups, eps=1e-5):
    """Parameter-free group normalization over [n,c,h,w]."""
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    if c % groups != 0:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.data.reshape(n, groups, c // groups * h * w)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (xg - mean) * inv

    def bwd(g):
        gg = g.reshape(n, groups, -1)
        gy = (gg * y).mean(axis=2, keepdims=True)
        gm = gg.mean(axis=2, keepdims=True)
        dx = inv * (gg - gm - y * gy)
        return ((x, dx.reshape(x.data.shape).astype(x.data.dtype, copy=False)),)

    return _result(y.reshape(x.data.shape).astype(x.data.dtype, copy=False), (x,), bwd)


def upsample_nearest(x, factor):
    x = as_tensor(x)
    f = int(factor)
    if f < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    data = x.data.repeat(f, axis=2).repeat(f, axis=3)

    def bwd(g):
        n, c, h, w = x.data.shape
        return ((x, g.reshape(n, c, h, f, w, f).sum(axis=(3, 5))),)

    return _result(data, (x,), bwd)


def resize_down(x, factor, mode="bilinear"):
    """Integer-factor downsample: 'bilinear' = box average, 'nearest' = top-left pick."""
    x = as_tensor(x)
    f = int(factor)
    n, c, h, w = x.data.shape
    if f < 1 or h % f or w % f:
        raise ValueError(f"resize_down: factor {factor} does not divide spatial dims {h}x{w}")
    if mode == "bilinear":
        data = x.data.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))

        def bwd(g):
            up = np.broadcast_to(
                g[:, :, :, None, :, None], (n, c, h // f, f, w // f, f)
            )
            return ((x, (up / (f * f)).reshape(x.data.shape).astype(x.data.dtype, copy=False)),)

    elif mode == "nearest":
        data = np.ascontiguousarray(x.data[:, :, ::f, ::f])

        def bwd(g):
            full = np.zeros_like(x.data)
            full[:, :, ::f, ::f] = g
            return ((x, full),)

    else:
        raise ValueError(f"resize_down: unknown mode {mode!r}")

    return _result(data.astype(x.data.dtype, copy=False), (x,), bwd)


# ---------------------------------------------------------------------------
# parameter helpers
# ---------------------------------------------------------------------------

def parameter(data, dtype=np.float32):
    t = Tensor(np.asarray(data, dtype=dtype), requires_grad=True)
    return t


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None
