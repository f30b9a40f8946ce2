"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable operation records a :class:`Node` carrying a
monotonically increasing id. ``Tensor.backward`` collects the nodes
reachable from the output and replays them in strictly decreasing id
order, which is the reverse of the order in which they were appended.
The graph is released once the backward pass completes.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from . import kernels

LOG_CLAMP = 1e-12

_node_ids = itertools.count()


class DimensionError(ValueError):
    """Raised when operand extents are incompatible."""


class Node:
    __slots__ = ("id", "op", "inputs", "backward")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], backward: Callable):
        self.id = next(_node_ids)
        self.op = op
        self.inputs = inputs
        self.backward = backward


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    """A row-major float64 array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None

    # -- construction helpers -------------------------------------------
    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t.node = None
        return t

    @staticmethod
    def zeros(*shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- autodiff --------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64).reshape(self.data.shape)

        order = _collect(self)
        grads = {id(self): grad}
        for t in order:
            g = grads.pop(id(t), None)
            if g is None:
                continue
            node = t.node
            if node is None:
                t.grad = g if t.grad is None else t.grad + g
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
            # intermediate results keep no gradient; free the record
            t.node = None

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _collect(root: Tensor) -> list:
    """Tensors reachable from ``root``: graph nodes in decreasing id, then leaves."""
    seen = set()
    interior = []
    leaves = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.node is None:
            if t.requires_grad:
                leaves.append(t)
            continue
        interior.append(t)
        for inp in t.node.inputs:
            if inp.requires_grad and id(inp) not in seen:
                stack.append(inp)
    interior.sort(key=lambda t: t.node.id, reverse=True)
    return interior + leaves


def as_tensor(x: ArrayLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, op: str, inputs: Tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor._wrap(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ----------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, "div", (a, b), backward)


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent
    return _make(out, "pow", (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    """Natural log with inputs clamped below at ``LOG_CLAMP``."""
    a = as_tensor(a)
    clamped = np.maximum(a.data, LOG_CLAMP)
    live = a.data >= LOG_CLAMP
    return _make(np.log(clamped), "log", (a,), lambda g: (g * live / clamped,))


def maximum(a: ArrayLike, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)`` for a constant floor; ties route gradient to ``a``."""
    a = as_tensor(a)
    live = a.data >= floor
    return _make(np.where(live, a.data, floor), "maximum", (a,), lambda g: (g * live,))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    live = a.data > 0
    return _make(a.data * live, "relu", (a,), lambda g: (g * live,))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a: ArrayLike) -> Tensor:
    """``log(1 + exp(a))`` evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, "softplus", (a,), lambda g: (g * _sigmoid(x),))


def stop_gradient(a: ArrayLike) -> Tensor:
    """Identity in the forward pass, a gradient barrier in the backward pass."""
    a = as_tensor(a)
    return Tensor._wrap(a.data)


# -- reductions -----------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def _expand(g: np.ndarray, shape, axes, keepdims):
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _make(np.asarray(out), "sum", (a,),
                 lambda g: (np.array(_expand(g, a.shape, axes, keepdims)),))


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return _make(np.asarray(out), "mean", (a,),
                 lambda g: (np.array(_expand(g, a.shape, axes, keepdims)) / count,))


def max_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(np.argmax(flat))

        def backward(g):
            gx = np.zeros(flat.shape)
            gx[idx] = float(np.sum(g))
            return (gx.reshape(a.shape),)

        out = flat[idx]
        if keepdims:
            out = np.full((1,) * a.ndim, out)
        return _make(np.asarray(out), "max", (a,), backward)

    (ax,) = _norm_axes(axis, a.ndim)
    idx = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax)

    def backward(g):
        gx = np.zeros(a.shape)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(gx, np.expand_dims(idx, ax), gk, axis=ax)
        return (gx,)

    return _make(out if keepdims else np.squeeze(out, ax), "max", (a,), backward)


def logsumexp(a: ArrayLike, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    (ax,) = _norm_axes(axis, a.ndim)
    m = np.max(a.data, axis=ax, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(a.data - m)
    s = e.sum(axis=ax, keepdims=True)
    out = np.log(s) + m
    weights = e / s

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        return (gk * weights,)

    return _make(out if keepdims else np.squeeze(out, ax), "logsumexp", (a,), backward)


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` using max subtraction."""
    a = as_tensor(a)
    (ax,) = _norm_axes(axis, a.ndim)
    e = np.exp(a.data - a.data.max(axis=ax, keepdims=True))
    out = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _make(out, "softmax", (a,), backward)


def log_softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    (ax,) = _norm_axes(axis, a.ndim)
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=ax, keepdims=True),)

    return _make(out, "log_softmax", (a,), backward)


# -- shape ----------------------------------------------------------------

def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, "transpose", (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: ArrayLike, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        gx = np.zeros(a.shape)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(np.array(out), "getitem", (a,), backward)


def concatenate(tensors: Iterable[ArrayLike], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    (ax,) = _norm_axes(axis, ts[0].ndim)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])
    out = np.concatenate([t.data for t in ts], axis=ax)

    def backward(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _make(out, "concatenate", ts, backward)


def stack(tensors: Iterable[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concatenate(expanded, axis=axis)


# -- linear algebra -------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product; batched when either operand has rank > 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, "matmul", (a, b), backward)


def l2norm(x: ArrayLike, axis: int = -1, keepdims: bool = False, eps: float = 1e-8) -> Tensor:
    """``max(|x|, eps)`` along ``axis``; no gradient flows where the floor is active."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    live = n > eps
    out = np.where(live, n, eps)

    def backward(g):
        g = g if keepdims else np.expand_dims(g, axis)
        return (np.where(live, g * x.data / np.where(live, n, 1.0), 0.0),)

    return _make(out if keepdims else np.squeeze(out, axis), "l2norm", (x,), backward)


def cosine_similarity(u: ArrayLike, v: ArrayLike, eps: float = 1e-8, axis: int = -1) -> Tensor:
    """``u.v / (max(|u|, eps) * max(|v|, eps))`` along ``axis``."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape[axis] < 1 or u.shape != v.shape:
        raise DimensionError(f"cosine_similarity needs equal non-empty shapes, got {u.shape} and {v.shape}")
    return sum_(u * v, axis) / (l2norm(u, axis, eps=eps) * l2norm(v, axis, eps=eps))


def normalize(x: ArrayLike, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """Scale to unit L2 norm along ``axis``."""
    x = as_tensor(x)
    return x / l2norm(x, axis, keepdims=True, eps=eps)


def pairwise_cosine(a: ArrayLike, b: ArrayLike, eps: float = 1e-8) -> Tensor:
    """Cosine similarity between every row of ``a`` [n x d] and every row of ``b`` [m x d]."""
    return matmul(normalize(a, -1, eps), transpose(normalize(b, -1, eps)))


# -- spatial --------------------------------------------------------------

def conv2d(x: ArrayLike, w: ArrayLike, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [B,C,H,W] with ``w`` [F,C,kh,kw], zero padded."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    B, C, H, W = x.shape
    F, _, kh, kw = w.shape
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    oh = (H + 2 * padding - kh) // stride + 1
    ow = (W + 2 * padding - kw) // stride + 1
    cols = kernels.im2col(np.ascontiguousarray(x.data), kh, kw, stride, padding)
    wmat = w.data.reshape(F, -1)
    out = np.matmul(wmat, cols).reshape(B, F, oh, ow)

    def backward(g):
        g2 = g.reshape(B, F, oh * ow)
        gw = np.einsum("bfp,bkp->fk", g2, cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            gx = kernels.col2im(np.ascontiguousarray(gcols), C, H, W, kh, kw, stride, padding)
        return gx, gw

    return _make(out, "conv2d", (x, w), backward)


def avg_pool2d(x: ArrayLike, kernel: int) -> Tensor:
    """Non-overlapping average pooling over the last two axes."""
    x = as_tensor(x)
    *lead, H, W = x.shape
    if H % kernel or W % kernel:
        raise DimensionError(f"avg_pool2d kernel {kernel} does not tile {H}x{W}")
    r = reshape(x, tuple(lead) + (H // kernel, kernel, W // kernel, kernel))
    n = len(lead)
    return mean(r, axis=(n + 1, n + 3))


def _interp_matrix(src: int, dst: int) -> np.ndarray:
    """Bilinear interpolation weights, half-pixel centres (align_corners=False)."""
    m = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        pos = (i + 0.5) * scale - 0.5
        pos = min(max(pos, 0.0), src - 1)
        lo = int(np.floor(pos))
        hi = min(lo + 1, src - 1)
        frac = pos - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


_interp_cache: dict = {}


def interp_matrix(src: int, dst: int) -> np.ndarray:
    key = (src, dst)
    if key not in _interp_cache:
        _interp_cache[key] = _interp_matrix(src, dst)
    return _interp_cache[key]


def upsample_bilinear(x: ArrayLike, size: Tuple[int, int]) -> Tensor:
    """Resize the last two axes of ``x`` to ``size`` with bilinear weights."""
    x = as_tensor(x)
    H, W = x.shape[-2:]
    ry = interp_matrix(H, size[0])
    rx = interp_matrix(W, size[1])
    out = np.matmul(np.matmul(ry, x.data), rx.T)
    return _make(out, "upsample", (x,), lambda g: (np.matmul(np.matmul(ry.T, g), rx),))


def resize_array(x: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a plain array over its last two axes."""
    H, W = x.shape[-2:]
    return np.matmul(np.matmul(interp_matrix(H, size[0]), x), interp_matrix(W, size[1]).T)
