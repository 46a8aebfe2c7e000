"""Differentiable kernels over NCHW tensors.

Every kernel is a plain numpy forward plus a closure for the reverse pass.
Reductions run in a fixed order, so results do not depend on thread count.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor

_branches = threading.local()


@contextmanager
def record_branches():
    """Collect the branch pattern (ReLU masks, argmax picks, ...) of every
    piecewise kernel run inside the block. Finite-difference checks use it
    to tell whether a perturbation crossed a kink."""
    prev = getattr(_branches, "log", None)
    log: list = []
    _branches.log = log
    try:
        yield log
    finally:
        _branches.log = prev


def note_branch(pattern: np.ndarray) -> None:
    log = getattr(_branches, "log", None)
    if log is not None:
        log.append(np.ascontiguousarray(pattern).tobytes())


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b or len(b) == 0:
        return a
    if len(a) == 0:
        return b
    if len(a) != len(b):
        raise ShapeError(f"{op}: rank mismatch between {a} and {b}")
    out = []
    for axis, (m, n) in enumerate(zip(a, b)):
        if m == n or n == 1:
            out.append(m)
        elif m == 1:
            out.append(n)
        else:
            raise ShapeError(f"{op}: incompatible extent on axis {axis}: {a} vs {b}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, (m, n) in enumerate(zip(g.shape, shape)) if n == 1 and m != 1)
    return g.sum(axis=axes, keepdims=True)


def _operands(a, b):
    ta = isinstance(a, Tensor)
    tb = isinstance(b, Tensor)
    if not ta and not tb:
        raise TypeError("at least one operand must be a Tensor")
    dtype = a.dtype if ta else b.dtype
    a = a if ta else Tensor(np.asarray(a, dtype=dtype), dtype=dtype)
    b = b if tb else Tensor(np.asarray(b, dtype=dtype), dtype=dtype)
    return a, b


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape(a.shape, b.shape, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape(a.shape, b.shape, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape(a.shape, b.shape, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(a.data * b.data, (a, b), backward, "mul")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return Tensor.from_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return Tensor.from_op(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor.from_op(x.data.reshape(shape), (x,), backward, "reshape")


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Join tensors along ``axis``; all other extents must agree."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: empty input list")
    ref = parts[0].shape
    axis = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref):
            raise ShapeError(f"concat: rank mismatch {ref} vs {p.shape}")
        for ax, (m, n) in enumerate(zip(ref, p.shape)):
            if ax != axis and m != n:
                raise ShapeError(f"concat: extent mismatch on axis {ax}: {ref} vs {p.shape}")
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            sl[axis] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(sl)])
        return grads

    return Tensor.from_op(np.concatenate([p.data for p in parts], axis=axis), parts, backward, "concat")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_branch(mask)

    def backward(g):
        return (g * mask,)

    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), backward, "relu")


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype)
    # keep the open interval even where rounding would saturate
    lo = np.nextafter(v.dtype.type(0), v.dtype.type(1))
    hi = np.nextafter(v.dtype.type(1), v.dtype.type(0))
    return np.clip(s, lo, hi)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)

    def backward(g):
        return (g * s * (1 - s),)

    return Tensor.from_op(s, (x,), backward, "sigmoid")


# ---------------------------------------------------------------------------
# convolution / normalization
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col and a single GEMM."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if c != ic:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels but weight {weight.shape} expects {ic}")
    if bias is not None and bias.shape != (oc,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {weight.shape} does not fit padded input {x.shape}")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    pointwise = kh == 1 and kw == 1
    if pointwise:
        cols = xp[:, :, ::stride, ::stride].transpose(0, 2, 3, 1).reshape(n * oh * ow, c)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    wmat = weight.data.reshape(oc, -1)
    out = cols @ wmat.T
    out = out.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, oc, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, oc)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = gm @ wmat
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            if pointwise:
                gxp[:, :, ::stride, ::stride] = dcols.reshape(n, oh, ow, c).transpose(0, 3, 1, 2)
            else:
                dcols = dcols.reshape(n, oh, ow, c, kh, kw)
                hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward, "conv2d")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batch_norm: input {x.shape} does not match {gamma.shape[0]} channels")
    c = x.shape[1]
    count = x.shape[0] * x.shape[2] * x.shape[3]
    shape = (1, c, 1, 1)
    if training:
        if count == 0:
            raise ShapeError("batch_norm: empty batch in training mode")
        # statistics in f64 so that constant inputs normalize to exactly zero
        mu = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        centered = x.data - mu.reshape(shape).astype(x.dtype)
        var = np.mean(np.square(centered, dtype=np.float64), axis=(0, 2, 3))
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= momentum
        running_mean += (1 - momentum) * mu.astype(running_mean.dtype)
        running_var *= momentum
        running_var += (1 - momentum) * unbiased.astype(running_var.dtype)
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
        centered = x.data - running_mean.reshape(shape).astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(shape)
    xhat = centered * inv_std
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (inv_std / count) * (count * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv_std
        return gx, gg, gbeta

    return Tensor.from_op(out.astype(x.dtype), (x, gamma, beta), backward, "batch_norm")


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def bilinear_weights(in_size: int, out_size: int, dtype=np.float32) -> np.ndarray:
    """Row-stochastic (out_size, in_size) matrix for half-pixel bilinear sampling.

    Source coordinate is ``(dst + 0.5) * in/out - 0.5`` clamped to the border.
    """
    m = np.zeros((out_size, in_size), dtype=np.float64)
    scale = in_size / out_size
    for d in range(out_size):
        src = max((d + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        lam = src - i0 if i0 < in_size - 1 else 0.0
        m[d, i0] += 1.0 - lam
        m[d, i1] += lam
    return m.astype(dtype)


def _separable(x: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    t = x.reshape(n * c * h, w) @ mw.T
    t = t.reshape(n * c, h, -1)
    return (mh @ t).reshape(n, c, mh.shape[0], mw.shape[0])


def _separable_op(x: Tensor, mh: np.ndarray, mw: np.ndarray, op: str) -> Tensor:
    out = _separable(x.data, mh, mw)

    def backward(g):
        return (_separable(g, mh.T, mw.T),)

    return Tensor.from_op(out, (x,), backward, op)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize to any positive size (no antialiasing)."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize: target size {out_h}x{out_w} must be positive")
    _, _, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return Tensor.from_op(x.data.copy(), (x,), lambda g: (g,), "resize")
    mh = bilinear_weights(h, out_h, x.dtype)
    mw = bilinear_weights(w, out_w, x.dtype)
    return _separable_op(x, mh, mw, "resize")


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample: expected NCHW input, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_upsample: target size {out_h}x{out_w} must be positive")
    if out_h < x.shape[2] or out_w < x.shape[3]:
        raise ShapeError(f"bilinear_upsample: target {out_h}x{out_w} is smaller than input {x.shape[2:]}")
    return resize_bilinear(x, out_h, out_w)


def adaptive_pool_weights(in_size: int, bins: int, dtype=np.float32) -> np.ndarray:
    """(bins, in_size) averaging matrix; region i spans floor(i*n/b) .. ceil((i+1)*n/b)."""
    m = np.zeros((bins, in_size), dtype=np.float64)
    for i in range(bins):
        start = (i * in_size) // bins
        end = -((-(i + 1) * in_size) // bins)
        m[i, start:end] = 1.0 / (end - start)
    return m.astype(dtype)


def adaptive_avg_pool(x: Tensor, bin_h: int, bin_w: int) -> Tensor:
    _, _, h, w = x.shape
    if not (1 <= bin_h <= h and 1 <= bin_w <= w):
        raise ShapeError(f"adaptive_avg_pool: bins {bin_h}x{bin_w} do not fit input {h}x{w}")
    mh = adaptive_pool_weights(h, bin_h, x.dtype)
    mw = adaptive_pool_weights(w, bin_w, x.dtype)
    return _separable_op(x, mh, mw, "adaptive_avg_pool")


# ---------------------------------------------------------------------------
# reductions used by the attention blocks
# ---------------------------------------------------------------------------

def _max_with_grad(x: Tensor, flat: np.ndarray, out_shape: tuple, restore, op: str) -> Tensor:
    # flat: (..., K) view; ties route the gradient to the lowest index
    idx = flat.argmax(axis=-1)
    note_branch(idx)
    vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gf = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gf, idx[..., None], g.reshape(idx.shape)[..., None], axis=-1)
        return (restore(gf),)

    return Tensor.from_op(vals.reshape(out_shape), (x,), backward, op)


def channel_mean(x: Tensor) -> Tensor:
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g / c, x.shape).astype(x.dtype),)

    return Tensor.from_op(x.data.mean(axis=1, keepdims=True), (x,), backward, "channel_mean")


def channel_max(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    flat = x.data.transpose(0, 2, 3, 1)
    return _max_with_grad(x, flat, (n, 1, h, w), lambda gf: gf.transpose(0, 3, 1, 2), "channel_max")


def channel_mean_max(x: Tensor):
    """Per-pixel mean and max over channels, each shaped [N,1,H,W]."""
    if x.ndim != 4 or x.shape[1] < 1:
        raise ShapeError(f"channel_mean_max: expected NCHW with C >= 1, got {x.shape}")
    return channel_mean(x), channel_max(x)


def spatial_avg(x: Tensor) -> Tensor:
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(x.dtype),)

    return Tensor.from_op(x.data.mean(axis=(2, 3), keepdims=True), (x,), backward, "spatial_avg")


def spatial_max(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    return _max_with_grad(x, flat, (n, c, 1, 1), lambda gf: gf.reshape(x.shape), "spatial_max")


def spatial_avg_max_pool(x: Tensor):
    """Per-channel global average and max, each shaped [N,C,1,1]."""
    if x.ndim != 4 or x.shape[2] * x.shape[3] < 1:
        raise ShapeError(f"spatial_avg_max_pool: expected non-empty NCHW input, got {x.shape}")
    return spatial_avg(x), spatial_max(x)


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------

def blend(a: Tensor, b: Tensor, alpha: Tensor) -> Tensor:
    """``a * alpha + b * (1 - alpha)`` with ``alpha`` broadcast over a and b.

    Evaluated in float64 and rounded once, so ``blend(f, f, alpha) == f``
    bit for bit and the alpha = 0 / 1 endpoints are exact.
    """
    if a.shape != b.shape:
        raise ShapeError(f"blend: operand shapes differ: {a.shape} vs {b.shape}")
    _broadcast_shape(a.shape, alpha.shape, "blend")
    al = alpha.data.astype(np.float64)
    out = (a.data * al + b.data * (1.0 - al)).astype(a.dtype)

    def backward(g):
        ga = g * alpha.data if a.requires_grad else None
        gb = g * (1 - alpha.data) if b.requires_grad else None
        gal = _unbroadcast(g * (a.data - b.data), alpha.shape) if alpha.requires_grad else None
        return ga, gb, gal

    return Tensor.from_op(out, (a, b, alpha), backward, "blend")
