"""Differentiable operations on :class:`Tensor`.

Each function computes its forward value with numpy and, when an input needs
a gradient, records a closure for the reverse sweep. Constants (numpy arrays
and Python scalars) are accepted wherever a tensor is.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

from .tensor import ShapeError, Tensor, as_tensor, make_result, record_macs


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    a = as_tensor(a, dtype=b.dtype if isinstance(b, Tensor) else None)
    b = as_tensor(b, dtype=a.dtype)
    return a, b


# ------------------------------------------------------------------ arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return make_result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return make_result(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: a._accumulate(-g), "neg")


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimension mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)
    record_macs(out.size * a.shape[-1])

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return make_result(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the trailing axis of ``x``."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight rows {weight.shape[0]} "
                         f"(x {x.shape}, weight {weight.shape})")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    record_macs(out.size * x.shape[-1])
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x._accumulate((g2 @ weight.data.T).reshape(x.shape))
        if weight.requires_grad:
            weight._accumulate(x2.T @ g2)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))

    return make_result(out, parents, backward, "linear")


# ------------------------------------------------------------------ reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, a.shape))

    return make_result(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = math.prod(a.shape[ax] for ax in axes)
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape/index

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_result(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_result(out, (a,), lambda g: a._accumulate(np.transpose(g, inv)), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape)
    return make_result(np.ascontiguousarray(out), (a,),
                       lambda g: a._accumulate(_unbroadcast(g, a.shape)), "broadcast_to")


def _has_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    for it in items:
        if isinstance(it, (list, np.ndarray)) and np.asarray(it).dtype != bool:
            return True
    return False


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        raise TypeError("index with numpy arrays, not tensors")
    out = a.data[idx]
    scatter = _has_advanced(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if scatter:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        a._accumulate(full)

    return make_result(np.array(out, copy=True), (a,), backward, "getitem")


def pick(x, index: np.ndarray) -> Tensor:
    """``x[..., index]`` taking one entry of the last axis per leading position."""
    x = as_tensor(x)
    index = np.asarray(index)
    if index.shape != x.shape[:-1]:
        raise ShapeError(f"pick: index shape {index.shape} != leading shape {x.shape[:-1]}")
    ix = index[..., None]
    out = np.take_along_axis(x.data, ix, axis=-1)[..., 0]

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, ix, g[..., None], axis=-1)
        x._accumulate(full)

    return make_result(out, (x,), backward, "pick")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return make_result(out, tensors, backward, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return make_result(out, tensors, backward, "stack")


def segment_sum(src, segment: np.ndarray, n: int) -> Tensor:
    """Sum rows of ``src`` into ``n`` buckets given by ``segment``."""
    src = as_tensor(src)
    segment = np.asarray(segment)
    m = src.shape[0]
    mat = sparse.csr_matrix((np.ones(m, dtype=src.dtype), (segment, np.arange(m))), shape=(n, m))
    flat = src.data.reshape(m, -1)
    out = np.asarray(mat @ flat).reshape((n,) + src.shape[1:])

    def backward(g):
        src._accumulate(g[segment])

    return make_result(out, (src,), backward, "segment_sum")


# --------------------------------------------------------------- elementwise

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: a._accumulate(g * out), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_result(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: a._accumulate(g * 0.5 / out), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: a._accumulate(g * (1.0 - out * out)), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    gate = a.data > 0
    return make_result(np.where(gate, a.data, 0).astype(a.dtype), (a,),
                       lambda g: a._accumulate(g * gate), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(a.dtype)
    return make_result(out, (a,), lambda g: a._accumulate(g * out * (1.0 - out)), "sigmoid")


def activation(x, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ------------------------------------------------------------ normalizations

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return make_result(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        a._accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return make_result(out, (a,), backward, "log_softmax")


def normalize(a, axis=-1, eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) with one mean/variance over ``axis``."""
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    mu = a.data.mean(axis=axes, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        a._accumulate(inv * (g - gm - xhat * gx))

    return make_result(xhat, (a,), backward, "normalize")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    return add(mul(normalize(x, -1, eps), gamma), beta)


# ---------------------------------------------------------------- convolution

def conv2d(x, weight, bias=None) -> Tensor:
    """Same-padded stride-1 convolution of an ``H x W x C_in`` map.

    ``weight`` has shape ``(k, k, C_in, C_out)`` with odd ``k``.
    """
    x = as_tensor(x)
    k, k2, cin, cout = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {weight.shape[:2]}")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape[-1]} != kernel channels {cin}")
    h, w = x.shape[:2]
    p = k // 2
    xp = np.pad(x.data, ((p, p), (p, p), (0, 0)))
    # windows: (h, w, cin, k, k) -> (h*w, k*k*cin) ordered like weight
    cols = sliding_window_view(xp, (k, k), axis=(0, 1)).transpose(0, 1, 3, 4, 2).reshape(h * w, k * k * cin)
    wmat = weight.data.reshape(k * k * cin, cout)
    out = cols @ wmat
    record_macs(out.size * k * k * cin)
    if bias is not None:
        out = out + bias.data
    out = out.reshape(h, w, cout)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(h * w, cout)
        if weight.requires_grad:
            weight._accumulate((cols.T @ g2).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(h, w, k, k, cin)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[i:i + h, j:j + w] += dcols[:, :, i, j]
            x._accumulate(dxp[p:p + h, p:p + w])

    return make_result(out, parents, backward, "conv2d")


# ------------------------------------------------------------------ sampling

def bilinear_sample(fmap, u, v, index: np.ndarray | None = None) -> Tensor:
    """Bilinearly interpolate ``fmap`` at continuous pixel coordinates.

    ``fmap`` is ``h x w x c`` or ``B x h x w x c``; for the batched form
    ``index`` gives the map each sample reads from. Pixel centres sit on
    integer coordinates; coordinates are clamped to ``[0, w-1] x [0, h-1]``.
    Returns ``u.shape + (c,)``.
    """
    fmap = as_tensor(fmap)
    u = as_tensor(u, dtype=fmap.dtype)
    v = as_tensor(v, dtype=fmap.dtype)
    fm = fmap.data if fmap.ndim == 4 else fmap.data[None]
    nb, h, w, c = fm.shape
    if h < 2 or w < 2:
        raise ShapeError(f"bilinear_sample needs a map of at least 2x2, got {h}x{w}")
    shape = u.shape
    uf = u.data.reshape(-1)
    vf = v.data.reshape(-1)
    b = np.zeros(uf.shape, dtype=np.int64) if index is None else np.asarray(index).reshape(-1)
    uc = np.clip(uf, 0.0, w - 1.0)
    vc = np.clip(vf, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(uc).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(vc).astype(np.int64), h - 2)
    fx = (uc - x0)[:, None]
    fy = (vc - y0)[:, None]
    flat = fm.reshape(nb * h * w, c)
    base = (b * h + y0) * w + x0
    f00, f01 = flat[base], flat[base + 1]
    f10, f11 = flat[base + w], flat[base + w + 1]
    gx, gy = 1.0 - fx, 1.0 - fy
    out = (f00 * (gx * gy) + f01 * (fx * gy) + f10 * (gx * fy) + f11 * (fx * fy)).reshape(shape + (c,))

    def backward(g):
        g2 = g.reshape(-1, c)
        if u.requires_grad:
            du = (((f01 - f00) * gy + (f11 - f10) * fy) * g2).sum(axis=1)
            du *= (uf >= 0) & (uf <= w - 1)
            u._accumulate(du.reshape(shape))
        if v.requires_grad:
            dv = (((f10 - f00) * gx + (f11 - f01) * fx) * g2).sum(axis=1)
            dv *= (vf >= 0) & (vf <= h - 1)
            v._accumulate(dv.reshape(shape))
        if fmap.requires_grad:
            dflat = np.zeros_like(flat)
            np.add.at(dflat, base, g2 * (gx * gy))
            np.add.at(dflat, base + 1, g2 * (fx * gy))
            np.add.at(dflat, base + w, g2 * (gx * fy))
            np.add.at(dflat, base + w + 1, g2 * (fx * fy))
            fmap._accumulate(dflat.reshape(fmap.shape))

    return make_result(out, (fmap, u, v), backward, "bilinear_sample")
