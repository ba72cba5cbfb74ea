"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced; backward()
walks the recorded graph once, accumulating gradients into leaf tensors
(parameters). Heavy inner loops (convolution patch extraction, bilinear
sampling, correlation volumes, median pooling) are delegated to the
selectable kernel backend in :mod:`duodepth.kernels`.

Conventions: image-like tensors are channels-last (N, H, W, C); matmul
operands are at least 2-D; python scalars mix freely with tensors.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ShapeError

_grad_enabled = True


class no_grad:
    """Context manager disabling graph construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- introspection ----------------------------------------------------
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

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- graph ------------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without explicit gradient requires a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = grad
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            node._backward = None
            node.grad = None  # only leaves keep their gradient

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
        return sub(as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic -----------------------------------------------------------


def add(a, b):
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        return _make(a.data + b, (a,), lambda d: (d,))
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda d: (_unbroadcast(d, a.data.shape), _unbroadcast(d, b.data.shape)),
    )


def sub(a, b):
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        return _make(a.data - b, (a,), lambda d: (d,))
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda d: (_unbroadcast(d, a.data.shape), _unbroadcast(-d, b.data.shape)),
    )


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda d: (-d,))


def mul(a, b):
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        return _make(a.data * b, (a,), lambda d: (d * b,))
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda d: (_unbroadcast(d * b.data, a.data.shape), _unbroadcast(d * a.data, b.data.shape)),
    )


def div(a, b):
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / b)
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data / b.data,
        (a, b),
        lambda d: (
            _unbroadcast(d / b.data, a.data.shape),
            _unbroadcast(-d * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def pow_const(a, p):
    a = as_tensor(a)
    return _make(a.data**p, (a,), lambda d: (d * p * a.data ** (p - 1),))


def texp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda d: (d * y,))


def tlog(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda d: (d / a.data,))


def ttanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda d: (d * (1.0 - y * y),))


def tabs(a):
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda d: (d * np.sign(a.data),))


def maximum_s(a, s: float):
    a = as_tensor(a)
    mask = a.data >= s
    return _make(np.maximum(a.data, s), (a,), lambda d: (d * mask,))


def minimum_s(a, s: float):
    a = as_tensor(a)
    mask = a.data <= s
    return _make(np.minimum(a.data, s), (a,), lambda d: (d * mask,))


def relu(a):
    return maximum_s(a, 0.0)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a):
    """GELU, tanh approximation (exact gradient of the approximation)."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    y = 0.5 * x * (1.0 + th)

    def bw(d):
        du = _GELU_C * (1.0 + 0.134145 * x2)
        return (d * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

    return _make(y, (a,), bw)


def stop_grad(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# -- shape ops ------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda d: (d.reshape(a.data.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda d: (d.transpose(inv),))


def getitem(a, idx):
    a = as_tensor(a)

    def bw(d):
        g = np.zeros_like(a.data)
        g[idx] = d
        return (g,)

    return _make(a.data[idx], (a,), bw)


def concat(ts, axis):
    ts = [as_tensor(t) for t in ts]
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(d):
        return tuple(np.split(d, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def pad_axes(a, pads):
    """Zero-pad. pads: dict axis -> (before, after)."""
    a = as_tensor(a)
    spec = [pads.get(ax, (0, 0)) for ax in range(a.ndim)]
    sl = tuple(slice(b, b + n) for (b, _), n in zip(spec, a.data.shape))
    return _make(np.pad(a.data, spec), (a,), lambda d: (d[sl],))


def repeat_axis(a, r, axis):
    """np.repeat along one axis (nearest-neighbor upsampling building block)."""
    a = as_tensor(a)
    shape = a.data.shape

    def bw(d):
        ds = d.reshape(shape[:axis] + (shape[axis], r) + shape[axis + 1 :])
        return (ds.sum(axis=axis + 1),)

    return _make(np.repeat(a.data, r, axis=axis), (a,), bw)


# -- reductions -----------------------------------------------------------


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    y = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(d):
        if not keepdims:
            d = np.expand_dims(d, axes)
        return (np.broadcast_to(d, a.data.shape).copy(),)

    return _make(y, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    n = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


# -- matmul ---------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    y = np.matmul(a.data, b.data)

    def bw(d):
        da = np.matmul(d, np.swapaxes(b.data, -1, -2))
        da = _unbroadcast(da, a.data.shape)
        if b.ndim == 2:
            k = a.data.shape[-1]
            db = np.matmul(a.data.reshape(-1, k).T, d.reshape(-1, d.shape[-1]))
        else:
            db = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), d), b.data.shape)
        return (da, db)

    return _make(y, (a, b), bw)


# -- normalization & attention math ----------------------------------------


def softmax(a, axis=-1, mask_add=None):
    """Softmax along `axis`; mask_add is a constant additive pre-softmax term."""
    a = as_tensor(a)
    z = a.data if mask_add is None else a.data + mask_add
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(d):
        t = d * y
        return (t - y * t.sum(axis=axis, keepdims=True),)

    return _make(y, (a,), bw)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(d):
        return (d - np.exp(y) * d.sum(axis=axis, keepdims=True),)

    return _make(y, (a,), bw)


def _norm_core(a, gamma, beta, axes, eps):
    x = a.data
    mu = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    y = xhat * gamma.data + beta.data
    n = int(np.prod([x.shape[ax] for ax in axes]))

    def bw(d):
        dxhat = d * gamma.data
        dx = (
            inv
            / n
            * (
                n * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        )
        dgamma = _unbroadcast(d * xhat, gamma.data.shape)
        dbeta = _unbroadcast(d, beta.data.shape)
        return (dx.astype(x.dtype, copy=False), dgamma, dbeta)

    return _make(y, (a, gamma, beta), bw)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalize over the last (channel) axis."""
    return _norm_core(as_tensor(a), gamma, beta, (as_tensor(a).ndim - 1,), eps)


def instance_norm2d(a, gamma, beta, eps=1e-5):
    """Normalize over spatial axes (1, 2) of an NHWC tensor, per sample/channel."""
    a = as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"instance_norm2d expects NHWC, got ndim={a.ndim}")
    return _norm_core(a, gamma, beta, (1, 2), eps)


def attention_bias(q, k, rq, rk):
    """Content-adaptive positional bias for windowed attention.

    q: (B, W, A, H, c) queries, k: (B, W, T, H, c) keys; rq, rk:
    (A, T, H, c) per-pair position vectors for the query/key roles.
    Returns beta: (B, W, H, A, T) with
    beta[..., a, t] = <q_a, rk[a,t]> + <k_t, rq[a,t]>.

    All contractions are phrased as batched matmuls (einsum would fall back
    to its slow non-BLAS path for these batch patterns).
    """
    q, k, rq, rk = as_tensor(q), as_tensor(k), as_tensor(rq), as_tensor(rk)
    b, w, a, h, c = q.data.shape
    t = k.data.shape[2]
    bw_ = b * w

    qp = np.ascontiguousarray(q.data.transpose(2, 3, 0, 1, 4)).reshape(a, h, bw_, c)
    rkp = rk.data.transpose(0, 2, 3, 1)  # (A, H, c, T)
    term1 = np.matmul(qp, rkp)  # (A, H, BW, T)

    kp = np.ascontiguousarray(k.data.transpose(2, 3, 0, 1, 4)).reshape(t, h, bw_, c)
    rqp = rq.data.transpose(1, 2, 3, 0)  # (T, H, c, A)
    term2 = np.matmul(kp, rqp)  # (T, H, BW, A)

    y = term1.reshape(a, h, b, w, t).transpose(2, 3, 1, 0, 4) + term2.reshape(t, h, b, w, a).transpose(
        2, 3, 1, 4, 0
    )

    def bw(d):
        # d: (B, W, H, A, T)
        dp_a = np.ascontiguousarray(d.transpose(3, 2, 0, 1, 4)).reshape(a, h, bw_, t)
        dq = np.matmul(dp_a, rkp.swapaxes(-1, -2))  # (A, H, BW, c)
        dq = dq.reshape(a, h, b, w, c).transpose(2, 3, 0, 1, 4)
        drk = np.matmul(dp_a.swapaxes(-1, -2), qp)  # (A, H, T, c)
        drk = drk.transpose(0, 2, 1, 3)  # (A, T, H, c)
        dp_t = np.ascontiguousarray(d.transpose(4, 2, 0, 1, 3)).reshape(t, h, bw_, a)
        dk = np.matmul(dp_t, rqp.swapaxes(-1, -2))  # (T, H, BW, c)
        dk = dk.reshape(t, h, b, w, c).transpose(2, 3, 0, 1, 4)
        drq = np.matmul(dp_t.swapaxes(-1, -2), kp)  # (T, H, A, c)
        drq = drq.transpose(2, 0, 1, 3)  # (A, T, H, c)
        return (dq, dk, drq, drk)

    return _make(y, (q, k, rq, rk), bw)


# -- gathers ----------------------------------------------------------------


def take_rows(table, idx):
    """Row lookup: table (R, C), idx int array -> out idx.shape + (C,)."""
    table = as_tensor(table)
    idx = np.asarray(idx)

    def bw(d):
        g = np.zeros_like(table.data)
        np.add.at(g, idx.ravel(), d.reshape(-1, table.data.shape[-1]))
        return (g,)

    return _make(table.data[idx], (table,), bw)


def gather_last(a, idx):
    """take_along_axis on the last axis. idx shape == a.shape[:-1] + (K,)."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    y = np.take_along_axis(a.data, idx, axis=-1)

    def bw(d):
        last = a.data.shape[-1]
        rows = int(np.prod(a.data.shape[:-1]))
        g = np.zeros((rows, last), dtype=a.dtype)
        np.add.at(g, (np.arange(rows)[:, None], idx.reshape(rows, -1)), d.reshape(rows, -1))
        return (g.reshape(a.data.shape),)

    return _make(y, (a,), bw)


# -- kernel-backed ops -------------------------------------------------------


def conv2d(a, w, b=None, stride=1, padding=0, pad_mode="zero"):
    """2-D convolution on NHWC input; weight (kh, kw, Cin, Cout)."""
    a, w = as_tensor(a), as_tensor(w)
    if b is not None:
        b = as_tensor(b)
    kh, kw, cin, cout = w.data.shape
    n, h, ww_, c = a.data.shape
    if c != cin:
        raise ShapeError(f"conv2d channel mismatch: input {c}, weight {cin}")
    p = padding

    def _pad(x):
        if p == 0:
            return x
        spec = ((0, 0), (p, p), (p, p), (0, 0))
        return np.pad(x, spec) if pad_mode == "zero" else np.pad(x, spec, mode="edge")

    xp = _pad(a.data)
    hp, wp = xp.shape[1], xp.shape[2]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = kernels.im2col(xp, kh, kw, stride)
    w2 = w.data.reshape(kh * kw * cin, cout)
    y2 = cols @ w2
    if b is not None:
        y2 = y2 + b.data
    y = y2.reshape(n, ho, wo, cout)
    parents = (a, w) if b is None else (a, w, b)

    def bw(d):
        d2 = np.ascontiguousarray(d.reshape(-1, cout))
        cols_b = kernels.im2col(_pad(a.data), kh, kw, stride)  # recomputed, not stored
        dw = (cols_b.T @ d2).reshape(w.data.shape)
        dcols = d2 @ w2.T
        dxp = kernels.col2im(dcols, n, hp, wp, cin, kh, kw, stride)
        if p == 0:
            dx = dxp
        elif pad_mode == "zero":
            dx = dxp[:, p : p + h, p : p + ww_]
        else:
            rows = dxp[:, p : p + h].copy()
            rows[:, 0] += dxp[:, :p].sum(axis=1)
            rows[:, -1] += dxp[:, p + h :].sum(axis=1)
            dx = rows[:, :, p : p + ww_].copy()
            dx[:, :, 0] += rows[:, :, :p].sum(axis=2)
            dx[:, :, -1] += rows[:, :, p + ww_ :].sum(axis=2)
        if b is None:
            return (dx, dw)
        return (dx, dw, d2.sum(axis=0))

    return _make(y, parents, bw)


def bilinear_gather(fmap, coords):
    """Horizontal bilinear sampling, differentiable in both arguments.

    fmap: (B, H, W, C); coords: (B, H, W, K) -> (B, H, W, K, C).
    """
    fmap, coords = as_tensor(fmap), as_tensor(coords)
    y = kernels.bilinear_gather(fmap.data, coords.data)

    def bw(d):
        return kernels.bilinear_gather_bwd(fmap.data, coords.data, np.ascontiguousarray(d))

    return _make(y, (fmap, coords), bw)


def corr_volume(f1, f2, d_max, scale):
    """Per-pixel inner products against horizontally shifted right features."""
    f1, f2 = as_tensor(f1), as_tensor(f2)
    y = kernels.corr_volume(f1.data, f2.data, d_max, scale)

    def bw(d):
        return kernels.corr_volume_bwd(f1.data, f2.data, np.ascontiguousarray(d), scale)

    return _make(y, (f1, f2), bw)


def median_pool2d(a, factor):
    """Block median (lower-of-two for even counts) over factor x factor tiles."""
    a = as_tensor(a)
    if a.ndim != 3:
        raise ShapeError(f"median_pool2d expects (B, H, W), got ndim={a.ndim}")
    b, h, w = a.data.shape
    if h % factor or w % factor:
        raise ShapeError(f"median_pool2d: {h}x{w} not divisible by {factor}")
    y, sel = kernels.median_pool(a.data, factor)

    def bw(d):
        return (kernels.median_pool_bwd(sel, np.ascontiguousarray(d), h, w),)

    return _make(y, (a,), bw)


def masked_median(a, mask):
    """Per-row median over masked entries. a: (N, P), mask: bool (N, P) -> (N,).

    Even-count rows take the lower of the two middle values, matching
    median_pool2d. Gradient routes to the selected element.
    """
    a = as_tensor(a)
    n, p = a.data.shape
    vals = np.empty(n, dtype=a.dtype)
    sel = np.empty(n, dtype=np.int64)
    for i in range(n):
        (valid_idx,) = np.nonzero(mask[i])
        if valid_idx.size == 0:
            raise ShapeError(f"masked_median: row {i} has no valid entries")
        vv = a.data[i, valid_idx]
        order = np.argsort(vv, kind="stable")
        pick = order[(valid_idx.size - 1) // 2]
        vals[i] = vv[pick]
        sel[i] = valid_idx[pick]

    def bw(d):
        g = np.zeros_like(a.data)
        g[np.arange(n), sel] = d
        return (g,)

    return _make(vals, (a,), bw)
