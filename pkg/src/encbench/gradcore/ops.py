"""Differentiable operators.

Every function takes and returns :class:`Tensor` objects and registers its
backward rule on the active :class:`Graph`.  Kernels are vectorized numpy;
``conv2d_reference`` is the loop-nest oracle for the convolution.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, InputError
from .tensor import Tensor, record

BN_EPS = 1e-5


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=like.dtype))


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and b.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum()).reshape(shape).astype(g.dtype)


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "add")
    out = Tensor._wrap(a.data + b.data)
    return record(out, (a, b), lambda g: (g, _reduce_to(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "sub")
    out = Tensor._wrap(a.data - b.data)
    return record(out, (a, b), lambda g: (g, _reduce_to(-g, b.shape)))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "mul")
    out = Tensor._wrap(a.data * b.data)
    return record(out, (a, b), lambda g: (g * b.data, _reduce_to(g * a.data, b.shape)))


def sum(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(x.data.sum(), dtype=x.dtype))
    return record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor._wrap(np.asarray(x.data.mean(), dtype=x.dtype))
    return record(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor._wrap(x.data.reshape(shape))
    return record(out, (x,), lambda g: (g.reshape(x.shape),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor._wrap(np.maximum(x.data, 0).astype(x.dtype, copy=False))
    return record(out, (x,), lambda g: (g * mask,))


def straight_through(x: Tensor, value: np.ndarray) -> Tensor:
    """Return a tensor holding ``value`` whose backward is the identity.

    Used to wrap a non-differentiable transform computed outside the graph.
    """
    value = np.asarray(value, dtype=x.dtype)
    if value.shape != x.shape:
        raise DimensionError(f"straight_through: {value.shape} vs {x.shape}")
    out = Tensor._wrap(value)
    return record(out, (x,), lambda g: (g,))


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with an FxCxkxk kernel."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weight")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if wc != c:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {wc}")
    if kh != kw:
        raise DimensionError("conv2d: only square kernels are supported")
    if stride < 1 or padding < 0:
        raise InputError("conv2d: stride must be >= 1 and padding >= 0")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(f"conv2d: kernel {kh} larger than padded input {h}x{w}")
    if bias is not None and bias.shape != (f,):
        raise DimensionError(f"conv2d: bias shape {bias.shape}, expected ({f},)")
    k = kh
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)

    xp = _pad(x.data, padding)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # rows (c, u, v), columns (n, i, j): inner copies run along contiguous output rows
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)
    wmat = weight.data.reshape(f, c * k * k)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out_t = Tensor._wrap(np.ascontiguousarray(out.reshape(f, n, ho, wo).transpose(1, 0, 2, 3)))

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(f, n * ho * wo)
        gw = (gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c, k, k, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + w]
            gx = np.ascontiguousarray(gxp)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out_t, inputs, backward)


def conv2d_reference(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray],
                     stride: int, padding: int) -> np.ndarray:
    """Direct loop-nest convolution, kept deliberately naive."""
    n, c, h, w = x.shape
    f, _, k, _ = weight.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    xp = _pad(x, padding)
    out = np.zeros((n, f, ho, wo), dtype=np.float64)
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[b, ch, i * stride + u, j * stride + v] * weight[o, ch, u, v]
                    out[b, o, i, j] = acc + (bias[o] if bias is not None else 0.0)
    return out


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange N x C*r*r x H x W into N x C x rH x rW."""
    if x.data.ndim != 4:
        raise DimensionError("pixel_shuffle expects 4-D input")
    n, cr, h, w = x.shape
    if r < 1 or cr % (r * r):
        raise DimensionError(f"pixel_shuffle: {cr} channels not divisible by r^2={r * r}")
    c = cr // (r * r)
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)
    out_t = Tensor._wrap(np.ascontiguousarray(out))
    return record(out_t, (x,), lambda g: (pixel_unshuffle_array(g, r),))


def pixel_unshuffle_array(y: np.ndarray, r: int) -> np.ndarray:
    """Inverse rearrangement of :func:`pixel_shuffle` on a raw array."""
    n, c, hr, wr = y.shape
    h, w = hr // r, wr // r
    return np.ascontiguousarray(
        y.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w))


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode batch statistics are used and the running averages are
    updated with the biased batch variance.
    """
    if x.data.ndim != 4:
        raise DimensionError("batchnorm2d expects 4-D input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm2d: affine params must have shape ({c},)")
    m = n * h * w
    if m < 1:
        raise DimensionError("batchnorm2d: empty input")
    dt = x.dtype
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean + mom * mu).astype(np.float32)
        state.running_var = ((1 - mom) * state.running_var + mom * var).astype(np.float32)
    else:
        mu = state.running_mean.astype(dt)
        var = state.running_var.astype(dt)
    inv = (1.0 / np.sqrt(var + BN_EPS)).astype(dt)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = Tensor._wrap((xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]).astype(dt))

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        scale = (gamma.data * inv)[None, :, None, None]
        if training:
            gx = scale / m * (m * g - gb[None, :, None, None] - xhat * gg[None, :, None, None])
        else:
            gx = g * scale
        return gx.astype(dt), gg, gb

    return record(out, (x, gamma, beta), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    out_t = Tensor._wrap(out)

    def backward(g):
        return (g @ weight.data, g.T @ x.data, g.sum(axis=0) if bias is not None else None)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out_t, inputs, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over the spatial dims: N x C x H x W -> N x C."""
    n, c, h, w = x.shape
    out = Tensor._wrap(x.data.mean(axis=(2, 3)))
    scale = 1.0 / (h * w)
    return record(out, (x,), lambda g: (np.broadcast_to(
        (g * scale)[:, :, None, None], x.shape).astype(x.dtype),))


def log_softmax_array(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of softmax(logits) against integer labels.

    ``reduction`` is ``"mean"`` (scalar) or ``"none"`` (per-sample vector).
    """
    if logits.data.ndim != 2:
        raise DimensionError("softmax_cross_entropy expects N x K logits")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} logits")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k})")
    logp = log_softmax_array(logits.data)
    per = -logp[np.arange(n), labels]
    if reduction == "mean":
        out = Tensor._wrap(np.asarray(per.mean(), dtype=logits.dtype))
    elif reduction == "none":
        out = Tensor._wrap(per.astype(logits.dtype))
    else:
        raise InputError(f"unknown reduction {reduction!r}")

    def backward(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        if reduction == "mean":
            return (d * (g / n),)
        return (d * g[:, None],)

    return record(out, (logits,), backward)
