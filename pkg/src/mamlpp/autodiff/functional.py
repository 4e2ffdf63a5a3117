"""Composite operations built from recorded primitives."""

from __future__ import annotations

import numpy as np

from ..errors import StructuralError
from .tensor import (
    Tensor,
    _make,
    add,
    is_recording,
    log_softmax,
    mean,
    mul,
    reduce_sum,
    reshape,
    rsqrt,
    scale,
    sub,
    tsum,
)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise StructuralError(f"cross_entropy: logits must be [batch, classes], got {logits.shape}")
    batch, classes = logits.shape
    if batch < 1 or labels.shape != (batch,):
        raise StructuralError(
            f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for batch of {batch}"
        )
    if labels.min() < 0 or labels.max() >= classes:
        raise StructuralError(
            f"cross_entropy: labels must lie in [0, {classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(batch), labels] = 1.0
    picked = tsum(mul(log_softmax(logits, axis=1), Tensor(onehot)))
    return scale(picked, -1.0 / batch)


def _channel_view(n_channels, ndim, axis):
    view = [1] * ndim
    view[axis] = n_channels
    return tuple(view)


def add_bias(x: Tensor, bias: Tensor, channel_axis: int = 1) -> Tensor:
    """Add a per-channel bias to ``x``."""
    if channel_axis in (-1, x.ndim - 1):
        return add(x, bias)
    return add(x, reshape(bias, _channel_view(bias.shape[0], x.ndim, channel_axis)))


def batchnorm_apply(xhat: Tensor, gamma: Tensor, beta: Tensor, channel_axis: int = 1) -> Tensor:
    """Per-channel affine ``gamma * xhat + beta``."""
    if channel_axis in (-1, xhat.ndim - 1):
        return add(mul(xhat, gamma), beta)
    view = _channel_view(gamma.shape[0], xhat.ndim, channel_axis)
    return add(mul(xhat, reshape(gamma, view)), reshape(beta, view))


def reduce_axes(x, channel_axis: int = 1):
    axis = channel_axis % x.ndim
    return tuple(a for a in range(x.ndim) if a != axis)


def _normalize_composite(x: Tensor, axes, eps):
    mu = mean(x, axes, keepdims=True)
    centred = sub(x, mu)
    var = mean(mul(centred, centred), axes, keepdims=True)
    inv = rsqrt(add(var, Tensor(np.asarray(eps, dtype=x.dtype))))
    return mul(centred, inv), inv


def batch_normalize(x: Tensor, eps: float, channel_axis: int = 1):
    """Normalize with the current batch statistics.

    Returns ``(xhat, batch_mean, batch_var)``; the statistics are plain
    arrays (biased variance) for running-average bookkeeping.

    A single fused node: its backward is evaluated in closed form, or, when
    the backward pass is itself being recorded, rebuilt from recorded
    primitives so it can be differentiated again.
    """
    axes = reduce_axes(x, channel_axis)
    # same rounding as the recorded composite, so both backward paths agree bitwise
    recip = x.dtype.type(1.0 / (x.size // x.shape[channel_axis]))

    def avg(a):
        return reduce_sum(a, axes, keepdims=True) * recip

    mu = avg(x.data)
    centred = x.data - mu
    var = avg(centred * centred)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centred * inv

    def backward(out, g, needs):
        if is_recording():
            xh, inv_t = _normalize_composite(x, axes, eps)
            inner = sub(sub(g, mean(g, axes, keepdims=True)),
                        mul(xh, mean(mul(g, xh), axes, keepdims=True)))
            return (mul(inner, inv_t),)
        gd = g.data
        inner = gd - avg(gd) - xhat * avg(gd * xhat)
        return (Tensor(inner * inv),)

    out = _make("batch_normalize", xhat, (x,), backward)
    return out, mu.reshape(-1), var.reshape(-1)


def running_normalize(x: Tensor, running_mean, running_var, eps: float, channel_axis: int = 1) -> Tensor:
    view = _channel_view(-1, x.ndim, channel_axis % x.ndim)
    m = np.asarray(running_mean, dtype=x.dtype).reshape(view)
    inv = (1.0 / np.sqrt(np.asarray(running_var, dtype=x.dtype) + eps)).reshape(view)
    return mul(sub(x, Tensor(m)), Tensor(inv.astype(x.dtype)))


def accuracy(logits, labels) -> float:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return float(np.mean(np.argmax(data, axis=1) == np.asarray(labels)))
