"""2D product-unit convolution.

Each output pixel is the product of the receptive-field inputs, each raised
to a learned exponent.  It is evaluated in the log domain: inputs are clamped
from below by a trainable threshold ``softplus(theta) + 1e-7``, log-transformed,
convolved with the exponent kernel, and exponentiated.  Zero padding in the
log domain is the same as padding the raw input with ones.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import NumericalOverflow, ShapeMismatch
from .functional import conv2d, conv_output_size
from .nn import Module, Parameter
from .tensor import Tensor, add, backward, clamp_min, exp, log, make_result, softplus

EPS_SHIFT = 1e-7


def threshold(theta: Tensor) -> Tensor:
    return add(softplus(theta), EPS_SHIFT)


def threshold_value(theta) -> float:
    return float(np.logaddexp(0.0, float(theta))) + EPS_SHIFT


def _exp_guarded(s: Tensor) -> Tensor:
    limit = np.log(np.finfo(s.dtype).max)
    top = float(s.data.max()) if s.size else 0.0
    if not np.isfinite(top) or top > limit:
        raise NumericalOverflow(
            f"product-unit log-domain activation {top:.4g} exceeds exp range {limit:.4g}",
            {"op": "pu_forward"},
        )
    return exp(s)


def pu_forward(x: Tensor, weight: Tensor, theta: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Product-unit convolution; differentiable in ``x``, ``weight`` and ``theta``."""
    if x.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"pu_forward: input {x.shape} incompatible with kernel {weight.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericalOverflow("product-unit input contains non-finite values", {"op": "pu_forward"})
    z = log(clamp_min(x, threshold(theta)))
    return _exp_guarded(conv2d(z, weight, stride, padding))


def pu_oracle(x, weight, theta, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Direct product over the receptive field, written as nested loops.

    Test oracle only; no gradients.  ``padding`` pads with ones.
    """
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    w = np.asarray(getattr(weight, "data", weight), dtype=np.float64)
    thr = threshold_value(getattr(theta, "data", theta))
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    if c != ci:
        raise ShapeMismatch(f"pu_oracle: input has {c} channels, kernel expects {ci}")
    xc = np.maximum(x, thr)
    if padding:
        xc = np.pad(xc, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=1.0)
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd, k, stride, padding)
    out = np.empty((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 1.0
                    for ch in range(c):
                        for m in range(k):
                            for q in range(k):
                                acc *= xc[b, ch, i * stride + m, j * stride + q] ** w[o, ch, m, q]
                    out[b, o, i, j] = acc
    return out


class ProductUnitConv2d(Module):
    """Drop-in replacement for a bias-free ``Conv2d`` with one extra scalar ``theta``."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(np.zeros((out_channels, in_channels, kernel_size, kernel_size), dtype=dtype))
        self.theta = Parameter(np.zeros((), dtype=dtype))

    def threshold(self) -> float:
        return threshold_value(self.theta.data)

    def forward(self, x):
        return pu_forward(x, self.weight, self.theta, self.stride, self.padding)

    def oracle(self, x) -> np.ndarray:
        return pu_oracle(x, self.weight, self.theta, self.stride, self.padding)


def pu_theta_gradient_contract(layer: ProductUnitConv2d, x: Tensor, upstream=None) -> float:
    """dL/dtheta for ``L = sum(upstream * layer(x))`` via the closed form.

    Only clamped positions carry gradient to the threshold, so
    ``dL/dtheta = sum_{clamped} dL/dz * sigmoid(theta) / threshold``
    where ``z`` is the post-log activation.  ``dL/dz`` is obtained by
    backpropagating through the convolution and exponential only, which keeps
    this route independent of the clamp and softplus backward rules.
    """
    xd = np.asarray(getattr(x, "data", x))
    theta = float(layer.theta.data)
    thr = threshold_value(theta)
    clamped = ~(xd > thr)
    z = Tensor(np.log(np.maximum(xd, thr)).astype(xd.dtype), requires_grad=True)
    w = Tensor(layer.weight.data)
    y = _exp_guarded(conv2d(z, w, layer.stride, layer.padding))
    up = np.ones_like(y.data) if upstream is None else np.asarray(upstream, dtype=y.dtype)
    loss = make_result((y.data * up).sum(), (y,), lambda g: (g * up,), "weighted_sum")
    backward(loss)
    return float((z.grad * clamped).sum() * expit(theta) / thr)
