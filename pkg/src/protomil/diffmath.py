"""Dense numpy tensors with a reverse-mode gradient tape.

Every primitive records its inputs and an adjoint closure on the output
tensor. ``backward`` sorts the recorded graph topologically (the tape) and
replays it in reverse, accumulating one adjoint per leaf.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf

_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch new tensors to float32 (training) or float64 (tests/oracles)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def get_default_dtype():
    return _DTYPE


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def backward(self, seed: np.ndarray | None = None) -> None:
        backward(self, seed)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str, check: bool = True) -> Tensor:
    # a finite sum implies finite entries; only an overflowing sum needs the elementwise check.
    # pure data movement (check=False) cannot create non-finite values from checked inputs
    if check and not math.isfinite(np.add.reduce(data, axis=None)) and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite output from primitive '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    for p in parents:
        if p.requires_grad:
            break
    else:
        p = None
    if p is not None:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary(f, a: Tensor, b: Tensor, op: str) -> np.ndarray:
    """Apply numpy ``f`` and turn a broadcasting failure into ShapeError."""
    try:
        return f(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.add, a, b, "add")

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.subtract, a, b, "sub")

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.multiply, a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.divide, a, b, "div")

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: _acc(a, -g), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: _acc(a, g * c), "scale")


def shift(a: Tensor, c: float) -> Tensor:
    return _make(a.data + float(c), (a,), lambda g: _acc(a, g), "shift")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: _acc(a, g * out), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: _acc(a, g / a.data), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: _acc(a, g * (1.0 - out * out)), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: _acc(a, g * out * (1.0 - out)), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: _acc(a, g * mask), "relu")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return _make(x * cdf, (a,), lambda g: _acc(a, g * (cdf + x * pdf)), "gelu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: _acc(a, g * inside), "clip")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, value, a.data)
    return _make(out, (a,), lambda g: _acc(a, np.where(mask, 0.0, g)), "masked_fill")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            _acc(a, g * bd)
            _acc(b, g * ad)
            return
        if ad.ndim == 1:  # (k) @ (..., k, n)
            if a.requires_grad:
                _acc(a, _unbroadcast((bd @ g[..., None])[..., 0], a.shape))
            if b.requires_grad:
                _acc(b, _unbroadcast(ad[:, None] * g[..., None, :], b.shape))
            return
        if bd.ndim == 1:  # (..., m, k) @ (k)
            if a.requires_grad:
                _acc(a, _unbroadcast(g[..., :, None] * bd, a.shape))
            if b.requires_grad:
                _acc(b, _unbroadcast((ad.swapaxes(-1, -2) @ g[..., None])[..., 0], b.shape))
            return
        if a.requires_grad:
            _acc(a, _unbroadcast(g @ bd.swapaxes(-1, -2), a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(ad.swapaxes(-1, -2) @ g, b.shape))

    return _make(out, (a, b), bw, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None and a.data.ndim == 2:
        return _make(a.data.T, (a,), lambda g: _acc(a, g.T), "transpose", check=False)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: _acc(a, g.transpose(inv)), "transpose", check=False)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: _acc(a, g.reshape(src)), "reshape", check=False)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from None
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _acc(p, g[tuple(idx)])

    return _make(out, parts, bw, "concat", check=False)


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows of ``a`` along axis 0 by an integer index set (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _acc(a, full)

    return _make(a.data[idx], (a,), bw, "take_rows", check=False)


def gather(a: Tensor, idx: np.ndarray) -> Tensor:
    """Per-row gather on a 2-D tensor: out[i, j] = a[i, idx[i, j]]."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"gather: incompatible shapes {a.shape} and index {idx.shape}")
    rows = np.arange(a.shape[0])[:, None]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (np.broadcast_to(rows, idx.shape), idx), g)
        _acc(a, full)

    return _make(a.data[rows, idx], (a,), bw, "gather", check=False)


def scatter(a: Tensor, idx: np.ndarray, width: int) -> Tensor:
    """Inverse of ``gather``: place a[i, j] at column idx[i, j] of a zero matrix."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.shape != idx.shape:
        raise ShapeError(f"scatter: values {a.shape} vs index {idx.shape}")
    rows = np.arange(a.shape[0])[:, None]
    out = np.zeros((a.shape[0], width), dtype=a.data.dtype)
    np.add.at(out, (np.broadcast_to(rows, idx.shape), idx), a.data)
    return _make(out, (a,), lambda g: _acc(a, g[rows, idx]), "scatter", check=False)


def index(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing."""
    out = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] += g
        _acc(a, full)

    return _make(np.array(out, copy=True), (a,), bw, "index", check=False)


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = np.mean(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape) / n)

    return _make(np.asarray(out), (a,), bw, "mean")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _acc(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (a,), bw, "softmax")


def l2_norm(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    nrm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    safe = np.where(nrm > 0, nrm, 1.0)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, g * np.where(nrm > 0, a.data / safe, 0.0))

    out = nrm if keepdims else np.squeeze(nrm, axis=axis)
    return _make(out, (a,), bw, "l2_norm")


def layer_norm(a: Tensor, eps: float = 1e-5, gain: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    """Normalize over the last axis (population variance); optional affine gain/bias."""
    rn = 1.0 / a.data.shape[-1]
    xc = a.data - a.data.sum(axis=-1, keepdims=True) * rn
    var = (xc * xc).sum(axis=-1, keepdims=True) * rn
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    if (gain is None) != (bias is None):
        raise ValueError("layer_norm: pass both gain and bias or neither")
    if gain is not None and (gain.shape != xhat.shape[-1:] or bias.shape != xhat.shape[-1:]):
        raise ShapeError(f"layer_norm: affine shapes {gain.shape}, {bias.shape} do not match {xhat.shape[-1:]}")
    out = xhat if gain is None else xhat * gain.data + bias.data
    lead = tuple(range(xhat.ndim - 1))

    def bw(g):
        if gain is not None:
            _acc(gain, (g * xhat).sum(axis=lead))
            _acc(bias, g.sum(axis=lead))
            g = g * gain.data
        if a.requires_grad:
            gm = g.sum(axis=-1, keepdims=True) * rn
            gx = (g * xhat).sum(axis=-1, keepdims=True) * rn
            _acc(a, inv * (g - gm - xhat * gx))

    parents = (a,) if gain is None else (a, gain, bias)
    return _make(out, parents, bw, "layer_norm")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) for x (..., n), w (n, m), b (m,)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or (b is not None and b.shape != (w.shape[1],)):
        raise ShapeError(f"linear: incompatible shapes {x.shape}, {w.shape}"
                         + ("" if b is None else f", {b.shape}"))
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def bw(g):
        if x.requires_grad:
            _acc(x, g @ w.data.T)
        if w.requires_grad:
            _acc(w, x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1]))
        if b is not None and b.requires_grad:
            _acc(b, g.reshape(-1, w.shape[1]).sum(axis=0))

    return _make(out, (x, w) if b is None else (x, w, b), bw, "linear")


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Scaled dot-product attention over (L, d) inputs split into ``n_heads`` heads.

    Returns the (L, d) concatenation of per-head softmax(q k^T / sqrt(dh)) v.
    """
    L, d = q.shape
    if k.shape != (L, d) or v.shape != (L, d) or d % n_heads:
        raise ShapeError(f"multi_head_attention: shapes {q.shape}, {k.shape}, {v.shape} with {n_heads} heads")
    dh = d // n_heads
    c = 1.0 / math.sqrt(dh)

    def split(a):
        return a.reshape(L, n_heads, dh).transpose(1, 0, 2)  # (h, L, dh)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    s = (qh @ kh.transpose(0, 2, 1)) * c
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    out = (p @ vh).transpose(1, 0, 2).reshape(L, d)

    def bw(g):
        gh = split(g)
        if v.requires_grad:
            _acc(v, (p.transpose(0, 2, 1) @ gh).transpose(1, 0, 2).reshape(L, d))
        gp = gh @ vh.transpose(0, 2, 1)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * c
        if q.requires_grad:
            _acc(q, (gs @ kh).transpose(1, 0, 2).reshape(L, d))
        if k.requires_grad:
            _acc(k, (gs.transpose(0, 2, 1) @ qh).transpose(1, 0, 2).reshape(L, d))

    return _make(out, (q, k, v), bw, "multi_head_attention")


def cumprod(a: Tensor) -> Tensor:
    """Cumulative product along the last axis."""
    x = a.data
    out = np.cumprod(x, axis=-1)
    n = x.shape[-1]

    def bw(g):
        # d out_j / d x_k = prod_{i<=j, i!=k} x_i  for k <= j; avoids dividing by x_k
        gx = np.zeros_like(x)
        for k in range(n):
            before = np.prod(x[..., :k], axis=-1)
            running = before
            acc = np.zeros_like(before)
            for j in range(k, n):
                if j > k:
                    running = running * x[..., j]
                acc = acc + g[..., j] * running
            gx[..., k] = acc
        _acc(a, gx)

    return _make(out, (a,), bw, "cumprod")


# ---------------------------------------------------------------- conv / dropout


def _pad_hw(a: np.ndarray, r: int) -> np.ndarray:
    h, w, c = a.shape
    out = np.zeros((h + 2 * r, w + 2 * r, c), dtype=a.dtype)
    out[r:r + h, r:r + w] = a
    return out


def _windows(xp: np.ndarray, k: int) -> np.ndarray:
    """Read-only (H, W, C, k, k) view of every k x k patch of a padded grid."""
    h, w, c = xp.shape[0] - k + 1, xp.shape[1] - k + 1, xp.shape[2]
    s0, s1, s2 = xp.strides
    return as_strided(xp, (h, w, c, k, k), (s0, s1, s2, s0, s1), writeable=False)


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Depthwise same-padded convolution.

    x: (H, W, C) grid; w: (k, k, C) with k odd; b: (C,) or None.
    """
    if x.ndim != 3 or w.ndim != 3 or w.shape[0] != w.shape[1] or w.shape[2] != x.shape[2]:
        raise ShapeError(f"depthwise_conv2d: incompatible shapes {x.shape} and {w.shape}")
    k = w.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"depthwise_conv2d: kernel size must be odd, got {k}")
    r = k // 2
    xp = _pad_hw(x.data, r)
    win = _windows(xp, k)  # (H, W, C, k, k)
    wt = np.moveaxis(w.data, 2, 0)  # (C, k, k)
    out = np.einsum("hwcij,cij->hwc", win, wt)
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        if x.requires_grad:
            # adjoint of a same-padded correlation: correlate g with the flipped kernel
            gwin = _windows(_pad_hw(g, r), k)
            _acc(x, np.einsum("hwcij,cij->hwc", gwin, wt[:, ::-1, ::-1]))
        if w.requires_grad:
            _acc(w, np.moveaxis(np.einsum("hwcij,hwc->cij", win, g), 0, 2))
        if b is not None and b.requires_grad:
            _acc(b, g.sum(axis=(0, 1)))

    return _make(out, parents, bw, "depthwise_conv2d")


class DropoutRNG:
    """Counter-based (Philox) stream so dropout masks replay bit-identically."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(shape)


def dropout(a: Tensor, p: float, rng: DropoutRNG | None, train: bool) -> Tensor:
    if not train or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs a DropoutRNG")
    keep = (rng.uniform(a.shape) >= p) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: _acc(a, g * keep), "dropout")


# ---------------------------------------------------------------- tape


def topo_order(root: Tensor) -> list[Tensor]:
    """The tape: nodes reachable from ``root`` in forward-evaluation order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, seed: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if not root.requires_grad:
        return
    if seed is None:
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root or an explicit seed, got {root.shape}")
        seed = np.ones_like(root.data)
    tape = topo_order(root)
    for node in tape:
        if node._backward is not None:
            node.grad = None
    root.grad = np.array(seed, dtype=root.data.dtype)
    for node in reversed(tape):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None  # interior adjoints are not kept


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- gradient check


class NonDeterministicError(RuntimeError):
    pass


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], rel_tol: float = 1e-4,
               step: float = 1e-6, abs_floor: float = 1e-8) -> dict:
    """Compare tape adjoints of scalar ``fn()`` to central differences.

    Returns ``{"passed": bool, "max_rel_err": {name: err}}``. Elementwise
    error is |a - n| / max(|a|, |n|); differences below ``abs_floor`` count
    as zero so that vanishing gradients are not judged on rounding noise.
    """
    f0 = fn()
    f1 = fn()
    if not np.array_equal(f0.data, f1.data):
        raise NonDeterministicError("fn returned different values on repeated evaluation")
    zero_grad(params)
    backward(f1)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    report: dict[str, float] = {}
    for i, (p, ga) in enumerate(zip(params, analytic)):
        gn = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = gn.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = float(fn().data)
            flat[j] = orig - step
            fm = float(fn().data)
            flat[j] = orig
            gflat[j] = (fp - fm) / (2.0 * step)
        diff = np.abs(ga - gn)
        denom = np.maximum(np.maximum(np.abs(ga), np.abs(gn)), abs_floor)
        rel = np.where(diff <= abs_floor, 0.0, diff / denom)
        err = float(rel.max()) if gn.size else 0.0
        report[p.name or f"param{i}"] = err
    zero_grad(params)
    return {"passed": all(e <= rel_tol for e in report.values()), "max_rel_err": report}
