"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation is a pure function of numpy arrays: identical inputs give
bitwise-identical outputs, and any NaN/Inf produced by an op raises
NonFiniteError instead of propagating.  Recording is confined to the
calling thread; parallel callers get independent recordings.

The op set is deliberately small: just enough for per-cell MLPs,
cross-attention, map smoothing/pooling, bilinear reads and the losses
used by the pipeline.  Gradients are checked against central differences
in the test suite and by the `audit` module.
"""

from __future__ import annotations

import threading
from functools import lru_cache

import numpy as np


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables recording (forward values only)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by op '{op}'")


def _quiet():
    return np.errstate(invalid="ignore", divide="ignore", over="ignore")


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    `grad` is None until `backward` reaches this leaf; repeated backward
    calls accumulate into it until `zero_grad` resets it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps", "_op")

    def __init__(self, data, requires_grad: bool = False):
        # asarray(order="C") keeps 0-d shapes; ascontiguousarray would not.
        arr = np.asarray(data, dtype=np.float64, order="C")
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjps = ()
        self._op = "leaf"

    # -- construction of op results ------------------------------------

    @staticmethod
    def _result(data, parents, vjps, op: str) -> "Tensor":
        arr = np.asarray(data, dtype=np.float64, order="C")
        _check_finite(arr, op)
        t = Tensor.__new__(Tensor)
        t.data = arr
        t.grad = None
        if grad_enabled() and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._vjps = tuple(vjps)
        else:
            t.requires_grad = False
            t._parents = ()
            t._vjps = ()
        t._op = op
        return t

    # -- basic properties ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op})"

    # -- autodiff engine ---------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar root, accumulating into leaf grads."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar root")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        flow: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flow.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g
                continue
            for p, vjp in zip(node._parents, node._vjps):
                if not p.requires_grad:
                    continue
                contrib = vjp(g)
                _check_finite(contrib, node._op + ".backward")
                acc = flow.get(id(p))
                if acc is None:
                    flow[id(p)] = np.array(contrib, dtype=np.float64, order="C")
                else:
                    acc += contrib

    # -- operator sugar ----------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data + b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(g, b.data.shape),
        ),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data - b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(-g, b.data.shape),
        ),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data * b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with _quiet():
        out = a.data / b.data
    return Tensor._result(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.data.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), (lambda g: -g,), "neg")


def pow_const(a, p: float) -> Tensor:
    """a ** p with p a plain python constant."""
    a = as_tensor(a)
    with _quiet():
        out = a.data**p
    return Tensor._result(
        out, (a,), (lambda g: g * p * a.data ** (p - 1.0),), "pow_const"
    )


def exp(a) -> Tensor:
    a = as_tensor(a)
    with _quiet():
        out = np.exp(a.data)
    return Tensor._result(out, (a,), (lambda g: g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with _quiet():
        out = np.log(a.data)
    return Tensor._result(out, (a,), (lambda g: g / a.data,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), (lambda g: g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return Tensor._result(out, (a,), (lambda g: g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    return Tensor._result(a.data * mask, (a,), (lambda g: g * mask,), "relu")


def clamp_min(a, v: float) -> Tensor:
    """max(a, v); gradient passes only where a > v."""
    a = as_tensor(a)
    mask = a.data > v
    return Tensor._result(
        np.maximum(a.data, v), (a,), (lambda g: g * mask,), "clamp_min"
    )


def smooth_l1(a) -> Tensor:
    """Elementwise huber: 0.5 x^2 for |x| < 1, |x| - 0.5 beyond."""
    a = as_tensor(a)
    x = a.data
    absx = np.abs(x)
    out = np.where(absx < 1.0, 0.5 * x * x, absx - 0.5)
    return Tensor._result(
        out, (a,), (lambda g: g * np.clip(x, -1.0, 1.0),), "smooth_l1"
    )


# -- reductions and shape ops -----------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape).copy()

    return Tensor._result(out, (a,), (vjp,), "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / count, a.data.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg / count, a.data.shape).copy()

    return Tensor._result(out, (a,), (vjp,), "mean")


def reshape(a, *shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.data.shape
    return Tensor._result(
        a.data.reshape(shape), (a,), (lambda g: g.reshape(old),), "reshape"
    )


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return Tensor._result(
        np.transpose(a.data, axes),
        (a,),
        (lambda g: np.ascontiguousarray(np.transpose(g, inv)),),
        "transpose",
    )


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return np.ascontiguousarray(g[tuple(sl)])

        return vjp

    return Tensor._result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        tuple(make_vjp(i) for i in range(len(tensors))),
        "concat",
    )


def getitem(a, key) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, key, g)
        return gx

    return Tensor._result(a.data[key], (a,), (vjp,), "getitem")


def gather_rows(a, idx) -> Tensor:
    """Select rows along axis 0; idx is an int array of any shape."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, idx, g)
        return gx

    return Tensor._result(a.data[idx], (a,), (vjp,), "gather_rows")


def scatter_rows(n_rows: int, idx, values) -> Tensor:
    """Zeros of shape (n_rows, ...) with `values` placed at unique row ids."""
    values = as_tensor(values)
    idx = np.asarray(idx, dtype=np.intp)
    if len(np.unique(idx)) != len(idx):
        raise ValueError("scatter_rows requires unique row indices")
    out = np.zeros((n_rows,) + values.data.shape[1:], dtype=np.float64)
    out[idx] = values.data
    return Tensor._result(
        out, (values,), (lambda g: np.ascontiguousarray(g[idx]),), "scatter_rows"
    )


# -- matmul ------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim > 2 or bd.ndim > 2:
        raise ValueError("matmul supports 1-D and 2-D operands only")
    out = ad @ bd

    def vjp_a(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd
        if ad.ndim == 1:  # (k,) @ (k,n) -> (n,)
            return bd @ g
        if bd.ndim == 1:  # (m,k) @ (k,) -> (m,)
            return np.outer(g, bd)
        return g @ bd.T

    def vjp_b(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return g * ad
        if ad.ndim == 1:
            return np.outer(ad, g)
        if bd.ndim == 1:
            return ad.T @ g
        return ad.T @ g

    return Tensor._result(out, (a, b), (vjp_a, vjp_b), "matmul")


# -- softmax ------------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis`."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - dot)

    return Tensor._result(out, (a,), (vjp,), "softmax")


# -- structured grid ops -------------------------------------------------------


@lru_cache(maxsize=32)
def _reflect_index(h: int, w: int, m: int) -> np.ndarray:
    idx = np.arange(h * w, dtype=np.intp).reshape(h, w)
    return np.pad(idx, m, mode="reflect")


def conv2d_reflect(a, kernel: np.ndarray) -> Tensor:
    """2-D correlation of an (H, W) map with a constant odd-sized kernel.

    The map is reflect-padded so output shape equals input shape.
    """
    a = as_tensor(a)
    kernel = np.asarray(kernel, dtype=np.float64)
    if a.data.ndim != 2:
        raise ValueError("conv2d_reflect expects an (H, W) map")
    kh, kw = kernel.shape
    if kh != kw or kh % 2 != 1:
        raise ValueError("kernel must be square with odd size")
    m = kh // 2
    h, w = a.data.shape
    idx = _reflect_index(h, w, m)
    padded = a.data.reshape(-1)[idx]
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw))
    out = np.einsum("ijkl,kl->ij", windows, kernel)

    def vjp(g):
        gpad = np.zeros((h + 2 * m, w + 2 * m), dtype=np.float64)
        for di in range(kh):
            for dj in range(kw):
                gpad[di : di + h, dj : dj + w] += g * kernel[di, dj]
        gx = np.zeros(h * w, dtype=np.float64)
        np.add.at(gx, idx.reshape(-1), gpad.reshape(-1))
        return gx.reshape(h, w)

    return Tensor._result(out, (a,), (vjp,), "conv2d_reflect")


def _pool_bounds(n: int) -> tuple[np.ndarray, np.ndarray]:
    starts = np.arange(0, n, 2)
    lengths = np.minimum(2, n - starts)
    return starts, lengths


def block_mean_pool2(a) -> Tensor:
    """2x2 mean pooling of a (C, H, W) map; odd edges average what exists."""
    a = as_tensor(a)
    c, h, w = a.data.shape
    rs, rl = _pool_bounds(h)
    cs, cl = _pool_bounds(w)
    sums = np.add.reduceat(np.add.reduceat(a.data, rs, axis=1), cs, axis=2)
    counts = np.outer(rl, cl).astype(np.float64)
    out = sums / counts

    def vjp(g):
        gc = g / counts
        return np.repeat(np.repeat(gc, rl, axis=1), cl, axis=2)

    return Tensor._result(out, (a,), (vjp,), "block_mean_pool2")


def nn_upsample2(a, out_h: int, out_w: int) -> Tensor:
    """Nearest-neighbor 2x upsample of (C, h, w) to (C, out_h, out_w)."""
    a = as_tensor(a)
    c, h, w = a.data.shape
    rows = np.arange(out_h) // 2
    cols = np.arange(out_w) // 2
    if rows.max() >= h or cols.max() >= w:
        raise ValueError("target extent exceeds 2x the source extent")
    out = a.data[:, rows][:, :, cols]
    rs, _ = _pool_bounds(out_h)
    cs, _ = _pool_bounds(out_w)

    def vjp(g):
        return np.add.reduceat(np.add.reduceat(g, rs, axis=1), cs, axis=2)

    return Tensor._result(out, (a,), (vjp,), "nn_upsample2")


def segment_mean(a, seg_ids, n_segments: int) -> Tensor:
    """Row-wise mean of (n, D) rows grouped by seg_ids; all groups nonempty."""
    a = as_tensor(a)
    seg_ids = np.asarray(seg_ids, dtype=np.intp)
    counts = np.bincount(seg_ids, minlength=n_segments).astype(np.float64)
    if (counts == 0).any():
        raise ValueError("segment_mean requires every segment nonempty")
    sums = np.zeros((n_segments,) + a.data.shape[1:], dtype=np.float64)
    np.add.at(sums, seg_ids, a.data)
    out = sums / counts.reshape((-1,) + (1,) * (a.data.ndim - 1))

    def vjp(g):
        per = g / counts.reshape((-1,) + (1,) * (g.ndim - 1))
        return per[seg_ids]

    return Tensor._result(out, (a,), (vjp,), "segment_mean")


def bilinear_read(fmap, points) -> Tensor:
    """Sample a (C, H, W) map at continuous (row, col) points.

    Cell centers sit at integer coordinates; reads outside the map see
    zeros.  Differentiable in both the map and the points.
    """
    fmap, points = as_tensor(fmap), as_tensor(points)
    c, h, w = fmap.data.shape
    pts = points.data
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must have shape (M, 2)")
    r, cc = pts[:, 0], pts[:, 1]
    r0 = np.floor(r)
    c0 = np.floor(cc)
    fr = r - r0
    fc = cc - c0
    r0 = r0.astype(np.intp)
    c0 = c0.astype(np.intp)
    corner_r = (r0, r0, r0 + 1, r0 + 1)
    corner_c = (c0, c0 + 1, c0, c0 + 1)
    wts = (
        (1.0 - fr) * (1.0 - fc),
        (1.0 - fr) * fc,
        fr * (1.0 - fc),
        fr * fc,
    )
    dw_dr = (-(1.0 - fc), -fc, (1.0 - fc), fc)
    dw_dc = (-(1.0 - fr), (1.0 - fr), -fr, fr)
    m = pts.shape[0]
    out = np.zeros((m, c), dtype=np.float64)
    vals = []
    masks = []
    for ri, ci, wt in zip(corner_r, corner_c, wts):
        ok = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        rs = np.where(ok, ri, 0)
        csafe = np.where(ok, ci, 0)
        v = fmap.data[:, rs, csafe].T * ok[:, None]
        vals.append(v)
        masks.append((ok, rs, csafe))
        out += wt[:, None] * v

    def vjp_map(g):
        gm = np.zeros_like(fmap.data)
        for (ok, rs, csafe), wt in zip(masks, wts):
            contrib = (g * (wt * ok)[:, None]).T
            np.add.at(gm.transpose(1, 2, 0), (rs, csafe), contrib.T)
        return gm

    def vjp_pts(g):
        gr = np.zeros(m, dtype=np.float64)
        gc = np.zeros(m, dtype=np.float64)
        for v, dwr, dwc in zip(vals, dw_dr, dw_dc):
            dot = (g * v).sum(axis=1)
            gr += dot * dwr
            gc += dot * dwc
        return np.stack([gr, gc], axis=1)

    return Tensor._result(out, (fmap, points), (vjp_map, vjp_pts), "bilinear_read")
