"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds a node holding its parents and a closure mapping the output
gradient to per-parent gradients. ``Tensor.backward`` walks the graph in
reverse topological order. Only what the toy networks need is provided.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .errors import ConfigError, DimensionError, NumericError, UsageError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_retain")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._retain = True

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._retain = False
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic attributes -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            bad = int(np.size(self.data) - np.count_nonzero(np.isfinite(self.data)))
            raise NumericError(f"{what} holds {bad} non-finite values", {"shape": list(self.shape)})
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- differentiation ---------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        Intermediate tensors keep a gradient only if ``retain_grad`` was called.
        """
        if self.data.size != 1:
            raise UsageError(f"backward needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _toposort(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None or node._retain:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = pending.get(key)
                pending[key] = pg if prev is None else prev + pg

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _scalar_error():
    raise UsageError("item() needs a single-element tensor")


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad

    def back(g):
        return (_unbroadcast(g, sa) if ra else None, _unbroadcast(g, sb) if rb else None)

    return Tensor._make(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad

    def back(g):
        return (_unbroadcast(g, sa) if ra else None, _unbroadcast(-g, sb) if rb else None)

    return Tensor._make(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad

    def back(g):
        return (
            _unbroadcast(g * bd, ad.shape) if ra else None,
            _unbroadcast(g * ad, bd.shape) if rb else None,
        )

    return Tensor._make(ad * bd, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    ra, rb = a.requires_grad, b.requires_grad

    def back(g):
        return (
            _unbroadcast(g / bd, ad.shape) if ra else None,
            _unbroadcast(-g * out / bd, bd.shape) if rb else None,
        )

    return Tensor._make(out, (a, b), back)


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return Tensor._make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = _sigmoid(ad)
    return Tensor._make(ad * s, (a,), lambda g: (g * s * (1.0 + ad * (1.0 - s)),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), back)


# -- reductions and shape ----------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return Tensor._make(a.data[idx], (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    ra, rb = a.requires_grad, b.requires_grad

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if ra else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if rb else None
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else y + bias


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if np.any(ids < 0) or np.any(ids >= table.shape[0]):
        raise DimensionError(f"token id outside [0, {table.shape[0]})")
    shape = table.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return Tensor._make(table.data[ids], (table,), back)


# -- convolution and spatial ops ---------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d wants 4-D input and kernel, got {x.shape} and {kernel.shape}")
    co, ci, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ConfigError(f"conv2d kernel must be square with odd size, got {k}x{k2}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"bad stride/padding {stride}/{padding}")
    if x.shape[1] != ci:
        raise DimensionError(f"conv2d input has {x.shape[1]} channels, kernel expects {ci}")
    b, _, h, w = x.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise DimensionError(f"input {h}x{w} too small for kernel {k} with padding {padding}")
    xpad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    out = _kernels.conv2d_forward(xpad, kernel.data, stride)
    ho, wo = out.shape[2], out.shape[3]
    kd = kernel.data
    rx, rk = x.requires_grad, kernel.requires_grad

    def back(g):
        gk = None
        if rk:
            win = sliding_window_view(xpad, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
            gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if not rx:
            return None, gk
        if stride == 1:
            # full correlation of the output gradient with the flipped kernel
            gpad = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
            gwin = sliding_window_view(gpad, (k, k), axis=(2, 3))
            gxp = np.tensordot(gwin, kd[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            return gx, gk
        gxp = np.zeros_like(xpad)
        for ki in range(k):
            for kj in range(k):
                contrib = np.einsum("bohw,oc->bchw", g, kd[:, :, ki, kj], optimize=True)
                gxp[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride] += contrib
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk

    y = Tensor._make(out, (x, kernel), back)
    if bias is not None:
        y = y + reshape(as_tensor(bias), (1, co, 1, 1))
    return y


def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    b, c = x.shape[:2]
    if c % groups:
        raise ConfigError(f"{c} channels not divisible into {groups} groups")
    xd = x.data.reshape(b, groups, -1)
    mu = xd.mean(axis=2, keepdims=True)
    var = xd.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv

    def back(g):
        gh = g.reshape(b, groups, -1)
        gx = inv * (gh - gh.mean(axis=2, keepdims=True) - xhat * (gh * xhat).mean(axis=2, keepdims=True))
        return (gx.reshape(x.shape),)

    y = Tensor._make(xhat.reshape(x.shape), (x,), back)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if gamma is not None:
        y = y * reshape(gamma, bshape)
    if beta is not None:
        y = y + reshape(beta, bshape)
    return y


def pool_sum(a: np.ndarray, kh: int, kw: int | None = None) -> np.ndarray:
    """Sums over non-overlapping kh x kw blocks, accumulated in row-major window order."""
    kw = kh if kw is None else kw
    b, c, h, w = a.shape
    blocks = a.reshape(b, c, h // kh, kh, w // kw, kw)
    acc = np.zeros((b, c, h // kh, w // kw))
    for di in range(kh):
        for dj in range(kw):
            acc += blocks[:, :, :, di, :, dj]
    return acc


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    b, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    out = pool_sum(x.data, k) / (k * k)

    def back(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return Tensor._make(out, (x,), back)


def upsample_nearest2d(x: Tensor, factor: int) -> Tensor:
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    return Tensor._make(out, (x,), lambda g: (pool_sum(g, factor),))


def mse(a: Tensor, b: Tensor) -> Tensor:
    d = as_tensor(a) - as_tensor(b)
    return mean(d * d)


# -- attention ---------------------------------------------------------------

def _tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return transpose(reshape(x, (b, c, h * w)), (0, 2, 1))


def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, n, c = t.shape
    return transpose(reshape(t, (b, n, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(t: Tensor) -> Tensor:
    b, heads, n, d = t.shape
    return reshape(transpose(t, (0, 2, 1, 3)), (b, n, heads * d))


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention over token tensors of shape (b, n, c)."""
    c = q.shape[-1]
    if c % heads:
        raise ConfigError(f"{c} channels not divisible by {heads} heads")
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scores = matmul(qh, transpose(kh, (0, 1, 3, 2))) * (1.0 / math.sqrt(c // heads))
    attn = softmax(scores, axis=-1)
    return _merge_heads(matmul(attn, vh))


def self_attention(x: Tensor, heads: int, weights: dict, kv_pool: int = 1) -> Tensor:
    """Multi-head self-attention over the spatial positions of ``x``.

    ``weights`` holds ``norm_gamma``/``norm_beta`` (group norm, 2 groups) and
    ``wq, wk, wv, wo`` stored (in, out) with biases ``bq, bk, bv, bo``. The
    output projection may be wider than ``c``; no residual is added here.
    With ``kv_pool > 1`` keys and values come from the normalised map
    average-pooled by that factor (every query still sees the whole image).
    """
    b, c, h, w = x.shape
    if c % heads:
        raise ConfigError(f"{c} channels not divisible by {heads} heads")
    xn = group_norm(x, 2, weights["norm_gamma"], weights["norm_beta"])
    tok = _tokens(xn)
    kv = tok if kv_pool == 1 else _tokens(avg_pool2d(xn, kv_pool))
    q = linear(tok, weights["wq"], weights["bq"])
    k = linear(kv, weights["wk"], weights["bk"])
    v = linear(kv, weights["wv"], weights["bv"])
    y = linear(multihead_attention(q, k, v, heads), weights["wo"], weights["bo"])
    cout = y.shape[-1]
    return reshape(transpose(y, (0, 2, 1)), (b, cout, h, w))


def cross_attention(x: Tensor, context: Tensor, heads: int, weights: dict) -> Tensor:
    """Image tokens attend over a context sequence (b, n_ctx, d_ctx)."""
    b, c, h, w = x.shape
    xn = group_norm(x, 2, weights["norm_gamma"], weights["norm_beta"])
    tok = _tokens(xn)
    q = linear(tok, weights["wq"], weights["bq"])
    k = linear(context, weights["wk"], weights["bk"])
    v = linear(context, weights["wv"], weights["bv"])
    y = linear(multihead_attention(q, k, v, heads), weights["wo"], weights["bo"])
    return reshape(transpose(y, (0, 2, 1)), (b, c, h, w))


# -- verification ------------------------------------------------------------

def grad_check(
    scalar_fn: Callable[..., Tensor],
    inputs: Iterable[Tensor],
    eps: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
    floor: float = 1e-12,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``scalar_fn(*inputs)`` must return a scalar tensor. Inputs without
    ``requires_grad`` are skipped. With ``max_elements`` set, a seeded subset
    of each input's elements is probed. The relative error of one element is
    ``|a - n| / max(|a|, |n|, s)`` with ``s = 1e-3 * max|a| + floor``, the max
    taken over every probed input. This keeps entries whose true gradient is
    zero (a key bias under softmax, say) from reporting round-off as relative
    error.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    loss = scalar_fn(*inputs)
    loss.backward()
    rng = Rng(seed)
    worst = 0.0
    gmax = max((float(np.max(np.abs(t.grad))) for t in inputs if t.requires_grad and t.grad is not None), default=0.0)
    scale = 1e-3 * gmax + floor
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.permutation(flat.size)[:max_elements])
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                up = scalar_fn(*inputs).item()
            flat[i] = orig - eps
            with no_grad():
                down = scalar_fn(*inputs).item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), scale)
            worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst


# -- random numbers ----------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _mix64_int(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """splitmix64 stream.

    The k-th draw (k = 1, 2, ...) is ``mix64(seed + k * 0x9E3779B97F4A7C15)``
    modulo 2**64. Uniforms take the top 53 bits: ``(u >> 11) * 2**-53``.
    Normals use Box-Muller on consecutive uniform pairs (u1, u2):
    ``r = sqrt(-2 ln(1 - u1))``, emitting ``r cos(2 pi u2)`` then
    ``r sin(2 pi u2)``; an odd trailing value is discarded.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def spawn(self, *keys: int) -> "Rng":
        """Independent child stream derived from this stream's state and ``keys``."""
        s = self.state
        for key in keys:
            s = _mix64_int((s ^ (int(key) & _MASK64)) + _GOLDEN)
        return Rng(s)

    def next_u64(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GOLDEN)
            out = _mix64(np.uint64(self.state) + steps)
        self.state = (self.state + n * _GOLDEN) & _MASK64
        return out

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if shape != () else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u = low + (high - low) * u
        return u.reshape(shape) if shape != () else u[0]

    def random(self) -> float:
        return float(self.uniform())

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if shape != () else 1
        pairs = (n + 1) // 2
        u = (self.next_u64(2 * pairs) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log1p(-u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        z = z[:n] * std
        return z.reshape(shape) if shape != () else z[0]

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high)."""
        shape = () if size is None else size
        u = self.uniform(shape)
        out = np.minimum(low + np.floor(u * (high - low)).astype(np.int64), high - 1)
        return int(out) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        # Fisher-Yates driven by one uniform per swap
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform((n - 1,))
        for i in range(n - 1, 0, -1):
            j = min(int(u[n - 1 - i] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def getstate(self) -> int:
        return self.state

    def setstate(self, state: int) -> None:
        self.state = int(state) & _MASK64


def randn(rng: Rng, shape, std: float = 1.0, requires_grad: bool = False) -> Tensor:
    return Tensor(rng.normal(tuple(shape), std), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)
