"""Differentiable operations over :class:`~splitee.tensor.Tensor`.

Each op validates shapes, computes the forward value, and registers a
backward closure that accumulates exact gradients into every parent that
can use them.  Convolution and max pooling defer their inner loops to
:mod:`splitee.kernels`.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ConfigError, NumericError, ShapeError
from .tensor import Tensor, traced

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _needs_grad(t: Tensor | None) -> bool:
    return t is not None and (t.requires_grad or bool(t._parents))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")

    def backward(gout):
        if _needs_grad(a):
            a.accumulate_grad(gout)
        if _needs_grad(b):
            b.accumulate_grad(gout)

    return traced(a.values + b.values, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[B,Din] @ weight[Din,Dout] + bias[Dout]."""
    if x.values.ndim != 2 or weight.values.ndim != 2:
        raise ShapeError("linear expects 2-D input and weight")
    if x.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(
            f"linear: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    out = x.values @ weight.values + bias.values

    def backward(gout):
        if _needs_grad(x):
            x.accumulate_grad(gout @ weight.values.T)
        if _needs_grad(weight):
            weight.accumulate_grad(x.values.T @ gout)
        if _needs_grad(bias):
            bias.accumulate_grad(gout.sum(axis=0))

    return traced(out, (x, weight, bias), backward)


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation; no bias (conv layers feed straight into batch norm)."""
    if x.values.ndim != 4 or weight.values.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    cout, cin, k, k2 = weight.shape
    if k != k2:
        raise ShapeError("conv2d expects square kernels")
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} != weight {cin}")
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ShapeError("conv2d: kernel exceeds padded input")
    out = kernels.conv2d_forward(x.values, weight.values, stride, padding)

    def backward(gout):
        if _needs_grad(x):
            x.accumulate_grad(
                kernels.conv2d_backward_input(weight.values, gout, x.shape, stride, padding)
            )
        if _needs_grad(weight):
            weight.accumulate_grad(
                kernels.conv2d_backward_weight(x.values, gout, weight.shape, stride, padding)
            )

    return traced(out, (x, weight), backward)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalization over (B, H, W); running stats updated in train mode."""
    if x.values.ndim != 4:
        raise ShapeError("batchnorm2d expects 4-D input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm2d: gamma/beta must have one entry per channel")
    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        if n < 2:
            raise NumericError("batchnorm2d: batch statistics degenerate (B*H*W < 2)")
        mean = x.values.mean(axis=axes)
        var = x.values.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    mean = np.array(mean, copy=True)
    xhat = (x.values - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.values[None, :, None, None] * xhat + beta.values[None, :, None, None]

    def backward(gout):
        xh = xhat
        if _needs_grad(gamma):
            gamma.accumulate_grad((gout * xh).sum(axis=axes))
        if _needs_grad(beta):
            beta.accumulate_grad(gout.sum(axis=axes))
        if _needs_grad(x):
            g_scaled = gout * gamma.values[None, :, None, None]
            if training:
                m1 = g_scaled.mean(axis=axes)
                m2 = (g_scaled * xh).mean(axis=axes)
                g_scaled -= m1[None, :, None, None]
                g_scaled -= xh * m2[None, :, None, None]
            g_scaled *= inv_std[None, :, None, None]
            x.accumulate_grad(g_scaled)

    return traced(out, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0

    def backward(gout):
        if _needs_grad(x):
            x.accumulate_grad(gout * mask)

    return traced(np.where(mask, x.values, 0.0), (x,), backward)


def max_pool(x: Tensor, k: int = 3, stride: int = 2, padding: int = 0) -> Tensor:
    if x.values.ndim != 4:
        raise ShapeError("max_pool expects 4-D input")
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ShapeError("max_pool: window exceeds padded input")
    out, arg = kernels.maxpool_forward(x.values, k, stride, padding)

    def backward(gout):
        if _needs_grad(x):
            x.accumulate_grad(
                kernels.maxpool_backward(gout, arg, x.shape, k, stride, padding)
            )

    return traced(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Reduce H x W to 1 x 1 by mean."""
    if x.values.ndim != 4:
        raise ShapeError("global_avg_pool expects 4-D input")
    b, c, h, w = x.shape
    out = x.values.mean(axis=(2, 3), keepdims=True)

    def backward(gout):
        if _needs_grad(x):
            x.accumulate_grad(np.broadcast_to(gout / (h * w), x.shape))

    return traced(out, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    b = x.shape[0]
    shape = x.shape
    out = x.values.reshape(b, -1)

    def backward(gout):
        if _needs_grad(x):
            x.accumulate_grad(gout.reshape(shape))

    return traced(out, (x,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by max subtraction (plain numpy)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood; backward yields (softmax - onehot)/B."""
    if logits.values.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects 2-D logits")
    b, k = logits.shape
    if k < 2:
        raise ConfigError("softmax_cross_entropy requires at least 2 classes")
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError("labels out of range")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsumexp - z[np.arange(b), labels]))
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    probs = softmax(logits.values)

    def backward(gout):
        if _needs_grad(logits):
            g = probs.copy()
            g[np.arange(b), labels] -= 1.0
            logits.accumulate_grad(float(gout) * g / b)

    return traced(np.float64(loss), (logits,), backward)
