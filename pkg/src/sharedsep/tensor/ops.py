"""Differentiable operations over :class:`Tensor`.

Every op returns a new tensor whose backward closure maps the upstream
gradient to a tuple with one entry per parent.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InvalidInputError
from .core import Tensor


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and b.data.size != 1 and a.data.size != 1:
        raise InvalidInputError(f"cannot add shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g if a.shape == g.shape else np.asarray(g.sum()).reshape(a.shape)
        gb = g if b.shape == g.shape else np.asarray(g.sum()).reshape(b.shape)
        return ga, gb

    return Tensor.from_op(a.data + b.data, (a, b), bw)


def scale(x: Tensor, s: float) -> Tensor:
    return Tensor.from_op(x.data * s, (x,), lambda g: (g * s,))


def sum_all(x: Tensor) -> Tensor:
    return Tensor.from_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation over ``(N, C, H, W)`` inputs."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.data.ndim != 4:
        raise InvalidInputError(f"conv2d expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise InvalidInputError(f"conv2d channel mismatch: input has {c}, weight expects {ci}")
    if sh < 1 or sw < 1:
        raise InvalidInputError("stride must be >= 1")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise InvalidInputError(f"kernel {(kh, kw)} larger than padded input {(h + 2 * ph, w + 2 * pw)}")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            cols = np.tensordot(g, weight.data, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i: i + sh * (ho - 1) + 1: sh, j: j + sw * (wo - 1) + 1: sw] += (
                        cols[..., i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, ph: ph + h, pw: pw + w]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over ``(N, H, W)``.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, exponential moving average).
    """
    if x.data.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise InvalidInputError(f"batch_norm channel mismatch: input {x.shape}, params {gamma.shape}")
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        if m < 2:
            raise InvalidInputError("batch_norm in train mode needs N*H*W >= 2")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mean, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                gx = (invstd[None, :, None, None] / m) * (
                    m * gxhat
                    - gxhat.sum(axis=axes)[None, :, None, None]
                    - xhat * (gxhat * xhat).sum(axis=axes)[None, :, None, None]
                )
            else:
                gx = gxhat * invstd[None, :, None, None]
        return gx, ggamma, gbeta

    return Tensor.from_op(out, (x, gamma, beta), bw)


def leaky_relu(x: Tensor, alpha: float = 0.1) -> Tensor:
    x = as_tensor(x)
    slope = np.where(x.data > 0, 1.0, alpha).astype(x.dtype)
    return Tensor.from_op(x.data * slope, (x,), lambda g: (g * slope,))


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def nn_upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour interpolation doubling both spatial axes."""
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        n, c, h2, w2 = g.shape
        return (g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return Tensor.from_op(out, (x,), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise InvalidInputError("concat_channels expects 4-D tensors")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise InvalidInputError(f"concat_channels spatial mismatch: {a.shape} vs {b.shape}")
    c1 = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return Tensor.from_op(out, (a, b), lambda g: (g[:, :c1], g[:, c1:]))


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error over every element (channels, frames, bins and batch)."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != t.shape:
        raise InvalidInputError(f"l1_loss shape mismatch: {pred.shape} vs {t.shape}")
    diff = pred.data - t
    n = diff.size
    loss = np.asarray(np.abs(diff).sum() / n, dtype=pred.dtype)
    return Tensor.from_op(loss, (pred,), lambda g: (g * np.sign(diff) / n,))
