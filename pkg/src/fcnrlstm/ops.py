"""Raw numeric kernels on NCHW arrays, each paired with its exact backward rule.

All functions are pure: inputs are never mutated and outputs are fresh arrays.
Arrays follow row-major NCHW layout, so element ``(n, c, h, w)`` sits at flat
offset ``((n*C + c)*H + h)*W + w``. Out-of-range convolution taps read as zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import InvalidArgumentError

__all__ = [
    "ConvSpec",
    "conv2d",
    "conv2d_backward",
    "deconv2d",
    "deconv2d_backward",
    "max_pool2d",
    "max_pool2d_backward",
    "concat_channels",
    "split_channels",
    "matmul",
    "matmul_backward",
    "add",
    "add_backward",
    "mul",
    "mul_backward",
    "sigmoid",
    "sigmoid_backward",
    "tanh",
    "tanh_backward",
    "relu",
    "relu_backward",
    "reshape",
    "reshape_backward",
]


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a (possibly dilated) convolution window."""

    kernel_h: int
    kernel_w: int
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w, self.stride, self.dilation) < 1:
            raise InvalidArgumentError(f"kernel, stride and dilation must be >= 1: {self}")
        if self.padding < 0:
            raise InvalidArgumentError(f"padding must be >= 0: {self}")

    @classmethod
    def same(cls, kernel: int, dilation: int = 1) -> "ConvSpec":
        """Stride-1 spec whose output matches the input extent (odd kernels)."""
        extent = kernel + (kernel - 1) * (dilation - 1)
        return cls(kernel, kernel, 1, dilation, extent // 2)

    @property
    def extent_h(self) -> int:
        return self.kernel_h + (self.kernel_h - 1) * (self.dilation - 1)

    @property
    def extent_w(self) -> int:
        return self.kernel_w + (self.kernel_w - 1) * (self.dilation - 1)

    def conv_output_size(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.extent_h) // self.stride + 1
        wo = (w + 2 * self.padding - self.extent_w) // self.stride + 1
        if ho < 1 or wo < 1:
            raise InvalidArgumentError(f"input {h}x{w} too small for {self}")
        return ho, wo

    def deconv_output_size(self, h: int, w: int) -> tuple[int, int]:
        ho = (h - 1) * self.stride - 2 * self.padding + self.extent_h
        wo = (w - 1) * self.stride - 2 * self.padding + self.extent_w
        if ho < 1 or wo < 1:
            raise InvalidArgumentError(f"input {h}x{w} gives empty output for {self}")
        return ho, wo


def _check_4d(name, a):
    if a.ndim != 4:
        raise InvalidArgumentError(f"{name} must be 4-D NCHW, got shape {a.shape}")


def _check_conv_args(x, weights, bias, spec, transposed):
    _check_4d("input", x)
    _check_4d("weights", weights)
    if (weights.shape[2], weights.shape[3]) != (spec.kernel_h, spec.kernel_w):
        raise InvalidArgumentError(
            f"weights kernel {weights.shape[2:]} does not match spec {spec.kernel_h}x{spec.kernel_w}")
    in_axis = 0 if transposed else 1
    if weights.shape[in_axis] != x.shape[1]:
        raise InvalidArgumentError(
            f"input has {x.shape[1]} channels, weights expect {weights.shape[in_axis]}")
    if bias is not None:
        out_ch = weights.shape[1] if transposed else weights.shape[0]
        if bias.shape != (out_ch,):
            raise InvalidArgumentError(f"bias shape {bias.shape} != ({out_ch},)")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d_with_cols(x, weights, bias, spec):
    """Forward convolution that also returns the patch matrix for reuse in backward."""
    _check_conv_args(x, weights, bias, spec, transposed=False)
    n, _, h, w = x.shape
    ho, wo = spec.conv_output_size(h, w)
    cols = _kernels.im2col(np.ascontiguousarray(x), spec.kernel_h, spec.kernel_w, spec.stride,
                           spec.padding, spec.dilation, ho, wo)
    cout = weights.shape[0]
    out = np.matmul(weights.reshape(cout, -1), cols)
    if bias is not None:
        out += bias[None, :, None]
    return out.reshape(n, cout, ho, wo), cols


def conv2d(x, weights, bias, spec: ConvSpec):
    """Cross-correlation ``out[n,co,y,x] = b[co] + sum w[co,ci,i,j] * x[n,ci,y*s-p+i*d,x*s-p+j*d]``."""
    return conv2d_with_cols(x, weights, bias, spec)[0]


def conv2d_backward_from_cols(grad_out, cols, x_shape, weights, spec, need_input=True):
    n, cin, h, w = x_shape
    cout = weights.shape[0]
    _, _, ho, wo = grad_out.shape
    g = grad_out.reshape(n, cout, ho * wo)
    grad_w = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weights.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_x = None
    if need_input:
        gcols = np.matmul(weights.reshape(cout, -1).T, g)
        grad_x = _kernels.col2im(gcols, n, cin, h, w, spec.kernel_h, spec.kernel_w, spec.stride,
                                 spec.padding, spec.dilation, ho, wo)
    return grad_x, grad_w, grad_b


def conv2d_backward(grad_out, x, weights, spec: ConvSpec):
    """Return ``(grad_input, grad_weights, grad_bias)`` for :func:`conv2d`."""
    _check_conv_args(x, weights, None, spec, transposed=False)
    ho, wo = spec.conv_output_size(x.shape[2], x.shape[3])
    if grad_out.shape != (x.shape[0], weights.shape[0], ho, wo):
        raise InvalidArgumentError(f"grad_out shape {grad_out.shape} inconsistent with forward")
    cols = _kernels.im2col(np.ascontiguousarray(x), spec.kernel_h, spec.kernel_w, spec.stride,
                           spec.padding, spec.dilation, ho, wo)
    return conv2d_backward_from_cols(grad_out, cols, x.shape, weights, spec)


def deconv2d(x, weights, bias, spec: ConvSpec):
    """Transposed convolution; ``weights`` is ``[Cin, Cout, kh, kw]``.

    With zero bias this is the adjoint of :func:`conv2d` under the same spec,
    where the conv would map ``Cout`` channels back to ``Cin``.
    """
    _check_conv_args(x, weights, bias, spec, transposed=True)
    n, cin, h, w = x.shape
    cout = weights.shape[1]
    ho, wo = spec.deconv_output_size(h, w)
    cols = np.matmul(weights.reshape(cin, -1).T, x.reshape(n, cin, h * w))
    out = _kernels.col2im(np.ascontiguousarray(cols), n, cout, ho, wo, spec.kernel_h,
                          spec.kernel_w, spec.stride, spec.padding, spec.dilation, h, w)
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def deconv2d_backward(grad_out, x, weights, spec: ConvSpec, need_input=True):
    """Return ``(grad_input, grad_weights, grad_bias)`` for :func:`deconv2d`."""
    _check_conv_args(x, weights, None, spec, transposed=True)
    n, cin, h, w = x.shape
    ho, wo = spec.deconv_output_size(h, w)
    if grad_out.shape != (n, weights.shape[1], ho, wo):
        raise InvalidArgumentError(f"grad_out shape {grad_out.shape} inconsistent with forward")
    gcols = _kernels.im2col(np.ascontiguousarray(grad_out), spec.kernel_h, spec.kernel_w,
                            spec.stride, spec.padding, spec.dilation, h, w)
    xf = x.reshape(n, cin, h * w)
    grad_w = np.matmul(xf, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weights.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_x = None
    if need_input:
        grad_x = np.matmul(weights.reshape(cin, -1), gcols).reshape(x.shape)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# pooling and channel plumbing
# ---------------------------------------------------------------------------


def max_pool2d(x, window: int, stride: int):
    """Max over ``window x window`` patches; returns ``(out, argmax)``.

    ``argmax`` holds the flat ``h*W + w`` index of the winning input pixel per
    output cell. Ties go to the lowest linear index.
    """
    _check_4d("input", x)
    if window < 1 or stride < 1:
        raise InvalidArgumentError("window and stride must be >= 1")
    h, w = x.shape[2:]
    if window > h or window > w:
        raise InvalidArgumentError(f"pool window {window} larger than input {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    return _kernels.maxpool_forward(np.ascontiguousarray(x), window, stride, ho, wo)


def max_pool2d_backward(grad_out, argmax, input_shape):
    if grad_out.shape != argmax.shape:
        raise InvalidArgumentError("grad_out and argmax shapes differ")
    return _kernels.maxpool_backward(np.ascontiguousarray(grad_out), argmax,
                                     input_shape[2], input_shape[3])


def concat_channels(tensors):
    if not tensors:
        raise InvalidArgumentError("concat_channels needs at least one tensor")
    for t in tensors:
        _check_4d("concat input", t)
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise InvalidArgumentError(
                f"cannot concat {t.shape} with {tensors[0].shape}: N,H,W must agree")
    return np.concatenate(tensors, axis=1)


def split_channels(grad, sizes):
    """Backward of :func:`concat_channels`: slice ``grad`` into per-input blocks."""
    if sum(sizes) != grad.shape[1]:
        raise InvalidArgumentError(f"split sizes {sizes} do not sum to {grad.shape[1]}")
    bounds = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(part) for part in np.split(grad, bounds, axis=1)]


# ---------------------------------------------------------------------------
# dense algebra and pointwise maps
# ---------------------------------------------------------------------------


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidArgumentError(f"matmul shapes {a.shape} and {b.shape} are incompatible")
    return a @ b


def matmul_backward(grad_out, a, b):
    return grad_out @ b.T, a.T @ grad_out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise InvalidArgumentError(f"shapes {a.shape} and {b.shape} do not broadcast") from exc


def add(a, b):
    _broadcast_shape(a, b)
    return a + b


def add_backward(grad_out, a_shape, b_shape):
    return _unbroadcast(grad_out, a_shape), _unbroadcast(grad_out, b_shape)


def mul(a, b):
    _broadcast_shape(a, b)
    return a * b


def mul_backward(grad_out, a, b):
    return _unbroadcast(grad_out * b, a.shape), _unbroadcast(grad_out * a, b.shape)


def sigmoid(x):
    # two-branch form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out, out):
    return grad_out * out * (1.0 - out)


def tanh(x):
    return np.tanh(x)


def tanh_backward(grad_out, out):
    return grad_out * (1.0 - out * out)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise InvalidArgumentError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    return x.reshape(shape)


def reshape_backward(grad_out, input_shape):
    return grad_out.reshape(input_shape)
