"""Primitive operators: forward numpy kernels with exact reverse-mode backward.

The operator set is fixed to what the estimators need (no general broadcasting
engine): elementwise add/mul with an optional python scalar, channel concat,
tanh/sigmoid/relu, zero-padded stride-1 conv2d, batchnorm2d, reduce_mean and
(masked) mse_loss. Tensors are NCHW.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InvariantError
from .tensor import Tensor, active_tape, record_op


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise InvariantError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, "add")
        out = a.data + b.data
        return record_op([a, b], out, lambda g: (g, g))
    scalar = float(b)
    out = a.data + scalar
    return record_op([a], out, lambda g: (g,))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, "mul")
        out = a.data * b.data
        a_data, b_data = a.data, b.data
        return record_op([a, b], out, lambda g: (g * b_data, g * a_data))
    scalar = float(b)
    out = a.data * scalar
    return record_op([a], out, lambda g: (g * scalar,))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise InvariantError("concat: need at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return record_op(list(tensors), out, backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channel-range view (concat's inverse); used to split fused conv outputs."""
    c = x.data.shape[1]
    if not (0 <= start < stop <= c):
        raise InvariantError(f"slice_channels: bad range [{start}, {stop}) for C={c}")
    out = x.data[:, start:stop]

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return record_op([x], out, backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return record_op([x], out, lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)
    return record_op([x], out, lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    positive = x.data > 0

    def backward(g):
        return (g * positive,)

    return record_op([x], out, backward)


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B,C,H,W) -> (B*H*W, C*kh*kw) with zero same-padding, stride 1."""
    b, c, h, w = x.shape
    if kh == 1 and kw == 1:
        return x.transpose(0, 2, 3, 1).reshape(b * h * w, c)
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (B,C,H,W,kh,kw)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * kh * kw)


def _col2im(dcol: np.ndarray, shape, kh: int, kw: int) -> np.ndarray:
    b, c, h, w = shape
    if kh == 1 and kw == 1:
        return dcol.reshape(b, h, w, c).transpose(0, 3, 1, 2)
    ph, pw = kh // 2, kw // 2
    dxp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=dcol.dtype)
    d6 = dcol.reshape(b, h, w, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, :, ki : ki + h, kj : kj + w] += d6[:, :, :, :, ki, kj]
    return dxp[:, :, ph : ph + h, pw : pw + w]


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Zero-padded stride-1 convolution; kernel must be square with odd size."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise InvariantError("conv2d expects NCHW input and OIHW weights")
    b, c, h, w = x.data.shape
    o, ci, kh, kw = weight.data.shape
    if ci != c:
        raise InvariantError(f"conv2d: input has {c} channels, weights expect {ci}")
    if kh != kw or kh % 2 == 0:
        raise InvariantError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if bias is not None and bias.data.shape != (o,):
        raise InvariantError(f"conv2d: bias must be ({o},), got {bias.data.shape}")

    col = _im2col(x.data, kh, kw)
    wmat = weight.data.reshape(o, ci * kh * kw).T
    out_flat = col @ wmat
    if bias is not None:
        out_flat = out_flat + bias.data
    out = out_flat.reshape(b, h, w, o).transpose(0, 3, 1, 2)

    x_shape = x.data.shape
    inputs = [x, weight] if bias is None else [x, weight, bias]
    needs_backward = active_tape() is not None and any(t.requires_grad for t in inputs)
    saved_col = col if needs_backward else None  # saved activations, freed with the tape

    def backward(g):
        g_flat = g.transpose(0, 2, 3, 1).reshape(b * h * w, o)
        d_w = (g_flat.T @ saved_col).reshape(o, ci, kh, kw)
        d_col = g_flat @ wmat.T
        d_x = _col2im(d_col, x_shape, kh, kw)
        if bias is None:
            return (d_x, d_w)
        return (d_x, d_w, g_flat.sum(axis=0))

    return record_op(inputs, out, backward)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    Training mode normalizes by batch statistics and updates the running
    buffers in place (they are state, not graph inputs); eval mode normalizes
    by the running averages.
    """
    if x.data.ndim != 4:
        raise InvariantError("batchnorm2d expects NCHW input")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise InvariantError("batchnorm2d: gamma/beta must be (C,)")
    axes = (0, 2, 3)
    n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean[:] = (1.0 - momentum) * running_mean + momentum * mean
        running_var[:] = (1.0 - momentum) * running_var + momentum * var
    else:
        mean = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        d_beta = g.sum(axis=axes)
        d_gamma = (g * xhat).sum(axis=axes)
        d_xhat = g * gamma.data[None, :, None, None]
        if training:
            s1 = d_xhat.sum(axis=axes)[None, :, None, None]
            s2 = (d_xhat * xhat).sum(axis=axes)[None, :, None, None]
            d_x = (inv_std[None, :, None, None] / n) * (n * d_xhat - s1 - xhat * s2)
        else:
            d_x = d_xhat * inv_std[None, :, None, None]
        return (d_x, d_gamma, d_beta)

    return record_op([x, gamma, beta], out, backward)


def reduce_mean(x: Tensor) -> Tensor:
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)
    size = x.data.size

    def backward(g):
        return (np.broadcast_to(g / size, x.data.shape).astype(x.data.dtype),)

    return record_op([x], out, backward)


def mse_loss(pred: Tensor, target: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean squared error against a constant target, optionally mask-weighted.

    The mask may broadcast over channels (e.g. (B,1,H,W) against (B,Q,H,W));
    the divisor is the number of contributing elements.
    """
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.data.shape:
        raise InvariantError(
            f"mse_loss: target shape {target.shape} != pred shape {pred.data.shape}"
        )
    diff = pred.data - target
    if mask is not None:
        weight = np.broadcast_to(np.asarray(mask, dtype=pred.data.dtype), diff.shape)
        denom = float(weight.sum())
        if denom <= 0:
            raise InvariantError("mse_loss: mask selects no elements")
        out = np.asarray((weight * diff * diff).sum() / denom, dtype=pred.data.dtype)

        def backward(g):
            return (g * 2.0 * weight * diff / denom,)

    else:
        denom = diff.size
        out = np.asarray((diff * diff).sum() / denom, dtype=pred.data.dtype)

        def backward(g):
            return (g * 2.0 * diff / denom,)

    return record_op([pred], out, backward)
