"""Differentiable primitives.

Every op takes and returns :class:`Tensor` objects and records a backward
function that maps the output gradient to one gradient per input. Gradients
for inputs that do not require them are never computed.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..errors import DimensionError, NonFiniteError
from .tensor import Tensor

__all__ = [
    "add", "sub", "mul", "neg", "power", "abs", "sum", "mean", "reshape",
    "batch_mean", "batch_var", "relu", "conv2d", "linear", "max_pool2d",
    "global_avg_pool", "softmax_cross_entropy", "norm_forward", "group_norm",
]


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and b.data.size != 1:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_scalar(g: np.ndarray, b: Tensor) -> np.ndarray:
    if b.shape == g.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(b.shape)


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, _reduce_scalar(g, b)))


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _same_shape(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -_reduce_scalar(g, b)))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _same_shape(a, b, "mul")

    def backward(g):
        ga = g * b.data if a.requires_grad else None
        gb = _reduce_scalar(g * a.data, b) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    x = a.data
    return Tensor._from_op(x ** p, (a,), lambda g: (g * p * x ** (p - 1),))


def abs(a: Tensor) -> Tensor:
    # np.sign(0) == 0, so the subgradient at the kink is zero.
    x = a.data
    return Tensor._from_op(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def sum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(a.data.sum(axis=axis)), (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    count = a.data.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return Tensor._from_op(np.asarray(a.data.mean(axis=axis)), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def batch_mean(x: Tensor) -> Tensor:
    """Per-element mean over the leading (batch) axis."""
    n = x.shape[0]
    shape = x.shape
    return Tensor._from_op(
        x.data.mean(axis=0), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),)
    )


def batch_var(x: Tensor) -> Tensor:
    """Per-element population variance over the leading (batch) axis."""
    n = x.shape[0]
    centered = x.data - x.data.mean(axis=0)
    var = (centered * centered).mean(axis=0)
    return Tensor._from_op(var, (x,), lambda g: (g * (2.0 / n) * centered,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))


def _conv_out(size: int, k: int, stride: int, pad: int, what: str) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise DimensionError(
            f"conv2d: {what} extent {size} with kernel {k}, stride {stride}, padding {pad} "
            "does not tile into an integral output"
        )
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation via im2col and a single matrix product."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: expected 4D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if c != cw:
        raise DimensionError(f"conv2d: input {x.shape} has {c} channels but weight {weight.shape} expects {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel size must be odd, got weight {weight.shape}")
    if bias is not None and bias.shape != (k,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    s, p = stride, padding
    ho = _conv_out(h, kh, s, p, "height")
    wo = _conv_out(w, kw, s, p, "width")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    # cols laid out (C, kh, kw, N, Ho, Wo) so one GEMM covers the whole batch
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s].transpose(1, 0, 2, 3)
    cols2 = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = weight.data.reshape(k, -1)
    out = wmat @ cols2
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(k, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        gm = g.transpose(1, 0, 2, 3).reshape(k, n * ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (gm @ cols2.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=1)
        if x.requires_grad:
            gcols = (wmat.T @ gm).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"max_pool2d: spatial dims {h}x{w} not divisible by {size}")
    win = x.data.reshape(n, c, h // size, size, w // size, size).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // size, w // size, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, h // size, w // size, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(n, c, h, w),)

    return Tensor._from_op(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return Tensor._from_op(
        out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)
    )


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be 2D, got {logits.shape}")
    n, k = logits.shape
    if n == 0:
        raise DimensionError("softmax_cross_entropy: empty batch")
    if labels.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"label out of range [0, {k}): {labels.min()}..{labels.max()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()
    if not np.isfinite(loss):
        raise NonFiniteError("cross-entropy is not finite")

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def norm_forward(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str = "batch",
    mean: Optional[np.ndarray] = None,
    var: Optional[np.ndarray] = None,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization followed by ``gamma * xhat + beta``.

    ``mode="batch"`` normalizes with statistics of the current batch over
    (N, H, W); ``mode="frozen"`` uses the supplied ``mean``/``var``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if x.ndim != 4:
        raise DimensionError(f"norm_forward: expected NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"norm_forward: affine shapes {gamma.shape}/{beta.shape} vs {c} channels")
    dt = x.dtype
    if mode == "batch":
        mu = x.data.mean(axis=(0, 2, 3))
        sig2 = x.data.var(axis=(0, 2, 3))
    elif mode == "frozen":
        if mean is None or var is None:
            raise ValueError("frozen mode needs mean and var")
        mu = np.asarray(mean, dtype=dt)
        sig2 = np.asarray(var, dtype=dt)
        if np.any(sig2 < 0):
            raise ValueError("frozen variance must be non-negative")
    else:
        raise ValueError(f"unknown norm mode {mode!r}")
    inv = (1.0 / np.sqrt(sig2 + eps)).astype(dt)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if mode == "frozen":
                gx = gxhat * inv[None, :, None, None]
            else:
                m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
                s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (inv[None, :, None, None] / m) * (m * gxhat - s1 - xhat * s2)
        return gx, gg, gb

    return Tensor._from_op(out, (x, gamma, beta), backward)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-sample normalization over channel groups, then per-channel affine."""
    n, c, h, w = x.shape
    if c % groups:
        raise DimensionError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"group_norm: affine shapes {gamma.shape}/{beta.shape} vs {c} channels")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(xg.var(axis=2, keepdims=True) + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w).astype(x.dtype)
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = (g * gamma.data[None, :, None, None]).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            m = xh.shape[2]
            s1 = gxhat.sum(axis=2, keepdims=True)
            s2 = (gxhat * xh).sum(axis=2, keepdims=True)
            gx = ((inv / m) * (m * gxhat - s1 - xh * s2)).reshape(n, c, h, w).astype(g.dtype)
        return gx, gg, gb

    return Tensor._from_op(out, (x, gamma, beta), backward)
