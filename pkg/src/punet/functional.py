"""Neural-network operations on :class:`~punet.tensor.Tensor`.

Convolution is cross-correlation implemented with an im2col matrix product.
The column matrix is rebuilt during backward instead of being kept alive,
which keeps memory flat for deep networks at the cost of one extra gather.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, InvalidConfig, ShapeMismatch
from .tensor import Tensor, flatten, make_result, mean, register

__all__ = [
    "conv_output_size",
    "conv2d",
    "batchnorm2d",
    "maxpool2d",
    "adaptive_avgpool_to_1x1",
    "linear",
    "cross_entropy",
    "flatten",
]


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _pad(a, padding, value=0.0):
    if padding == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def _windows(xp, kh, kw, stride):
    # (N, C, Ho, Wo, kh, kw) view
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _im2col(x, kh, kw, stride, padding, ho, wo):
    """Columns laid out as (C*kh*kw, N*Ho*Wo), one block copy per kernel offset."""
    n, c = x.shape[:2]
    xp = _pad(x, padding).transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(dcols, x_shape, kh, kw, stride, padding, ho, wo):
    n, c, h, w = x_shape
    dcols = dcols.reshape(c, kh, kw, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
    return dxp[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3)


@register("conv2d")
def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    if stride < 1 or padding < 0 or w.shape[2] < 1:
        raise InvalidConfig(f"bad conv2d config: stride={stride}, padding={padding}")
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeMismatch(f"conv2d: input has {c} channels, kernel expects {ci}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise InvalidConfig(f"conv2d output would be {ho}x{wo}")

    cols = _im2col(x.data, kh, kw, stride, padding, ho, wo)
    wmat = w.data.reshape(co, -1)
    out = (wmat @ cols).reshape(co, n, ho, wo).transpose(1, 0, 2, 3)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(co, -1)
        dx = dw = None
        if w.requires_grad:
            dw = (g2 @ _im2col(x.data, kh, kw, stride, padding, ho, wo).T).reshape(w.shape)
        if x.requires_grad:
            dx = _col2im(wmat.T @ g2, x.shape, kh, kw, stride, padding, ho, wo)
        return dx, dw

    return make_result(np.ascontiguousarray(out), (x, w), bw, "conv2d")


@register("batchnorm2d")
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
    """Per-channel batch normalisation over (N, H, W).

    In training mode the running statistics are updated in place; the
    running variance uses the unbiased batch estimate.
    """
    c = x.shape[1]
    for name, v in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if v.shape != (c,):
            raise InvalidConfig(f"batchnorm2d: {name} has shape {v.shape}, expected ({c},)")
    axes = (0, 2, 3)
    shp = (1, c, 1, 1)
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shp).astype(x.dtype)) * inv_std.reshape(shp)
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(shp)
        if training:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            dx = (
                inv_std.reshape(shp)
                / m
                * (m * dxhat - dxhat.sum(axis=axes, keepdims=True) - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            )
        else:
            dx = dxhat * inv_std.reshape(shp)
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), bw, "batchnorm2d")


@register("maxpool2d")
def maxpool2d(x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    n, c, h, w = x.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise InvalidConfig(f"maxpool2d output would be {ho}x{wo}")
    win = _windows(_pad(x.data, padding, -np.inf), k, k, stride).reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * (arg == idx)
        return (dxp[:, :, padding : padding + h, padding : padding + w],)

    return make_result(out, (x,), bw, "maxpool2d")


def adaptive_avgpool_to_1x1(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3), keepdims=True)


@register("linear")
def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeMismatch(f"linear: input features {x.shape[-1]} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return make_result(out, inputs, bw, "linear")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


@register("cross_entropy")
def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"cross_entropy: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DomainError(f"labels must lie in [0, {k})")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / n),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")
