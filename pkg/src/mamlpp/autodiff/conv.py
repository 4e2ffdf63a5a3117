"""Strided 2-D convolution as three mutually-differentiable primitives.

``conv2d``, its input gradient (a transposed convolution) and its weight
gradient are all bilinear, and the derivative of each one is expressible
through the other two.  Keeping all three as recorded primitives lets
second-order gradients flow through convolutions.

Kernels are always OIHW.  Activations are NCHW by default; ``layout="NHWC"``
keeps channels last, which makes the im2col gather copy contiguous runs and
is what the base network uses internally.
"""

from __future__ import annotations

import numpy as np

from ..errors import StructuralError
from .tensor import Tensor, _make

LAYOUTS = ("NCHW", "NHWC")


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _tap_ranges(size, out, k, stride, padding):
    """For each kernel tap, the output slice it reaches and the input slice it reads."""
    taps = []
    for i in range(k):
        lo = max(0, -(-(padding - i) // stride))
        hi = min(out, (size - 1 + padding - i) // stride + 1)
        start = stride * lo + i - padding
        taps.append((lo, hi, slice(start, start + stride * (hi - lo - 1) + 1, stride)))
    return taps


def _cols(x, kh, kw, stride, padding, ho, wo):
    """im2col of NHWC ``x`` as a [N*Ho*Wo, kh*kw*C] matrix."""
    n, h, w, c = x.shape
    alloc = np.zeros if padding else np.empty
    cols = alloc((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i, (h0, h1, hs) in enumerate(_tap_ranges(h, ho, kh, stride, padding)):
        for j, (w0, w1, ws) in enumerate(_tap_ranges(w, wo, kw, stride, padding)):
            if h1 > h0 and w1 > w0:
                cols[:, h0:h1, w0:w1, i, j] = x[:, hs, ws]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _kernel_matrix(w):
    o, c, kh, kw = w.shape
    return w.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)


def _fwd(x, w, stride, padding):
    n, h, wd, c = x.shape
    o, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    out = _cols(x, kh, kw, stride, padding, ho, wo) @ _kernel_matrix(w)
    return out.reshape(n, ho, wo, o)


def _input_grad(g, w, x_shape, stride, padding):
    n, h, wd, c = x_shape
    o, _, kh, kw = w.shape
    _, ho, wo, _ = g.shape
    dcols = (g.reshape(-1, o) @ _kernel_matrix(w).T).reshape(n, ho, wo, kh, kw, c)
    dx = np.zeros((n, h, wd, c), dtype=dcols.dtype)
    for i, (h0, h1, hs) in enumerate(_tap_ranges(h, ho, kh, stride, padding)):
        for j, (w0, w1, ws) in enumerate(_tap_ranges(wd, wo, kw, stride, padding)):
            if h1 > h0 and w1 > w0:
                dx[:, hs, ws] += dcols[:, h0:h1, w0:w1, i, j]
    return dx


def _weight_grad(x, g, w_shape, stride, padding):
    o, c, kh, kw = w_shape
    _, ho, wo, _ = g.shape
    dw = _cols(x, kh, kw, stride, padding, ho, wo).T @ g.reshape(-1, o)
    return dw.reshape(kh, kw, c, o).transpose(3, 2, 0, 1).copy()


def _to_nhwc(a, layout):
    return a if layout == "NHWC" else a.transpose(0, 2, 3, 1)


def _from_nhwc(a, layout):
    return a if layout == "NHWC" else np.ascontiguousarray(a.transpose(0, 3, 1, 2))


def _nhwc_shape(shape, layout):
    return tuple(shape) if layout == "NHWC" else (shape[0], shape[2], shape[3], shape[1])


def _check_layout(layout):
    if layout not in LAYOUTS:
        raise StructuralError(f"unknown layout '{layout}', expected one of {LAYOUTS}")


def conv2d(x: Tensor, w: Tensor, stride=1, padding=0, layout="NCHW") -> Tensor:
    """Cross-correlate ``x`` with OIHW kernel ``w`` at the given stride and zero padding."""
    _check_layout(layout)
    channels = x.shape[1] if layout == "NCHW" else x.shape[-1]
    if x.ndim != 4 or w.ndim != 4 or channels != w.shape[1]:
        raise StructuralError(
            f"conv2d: input {x.shape} ({layout}) incompatible with kernel {w.shape} (OIHW)"
        )
    spatial = x.shape[2:] if layout == "NCHW" else x.shape[1:3]
    ho = conv_output_size(spatial[0], w.shape[2], stride, padding)
    wo = conv_output_size(spatial[1], w.shape[3], stride, padding)
    if ho < 1 or wo < 1:
        raise StructuralError(
            f"conv2d: kernel {w.shape[2:]} with stride {stride}, padding {padding} "
            f"does not fit input {tuple(spatial)}"
        )
    x_shape, w_shape = x.shape, w.shape

    def backward(out, g, needs):
        return (
            conv2d_input_grad(g, w, x_shape, stride, padding, layout) if needs[0] else None,
            conv2d_weight_grad(x, g, w_shape, stride, padding, layout) if needs[1] else None,
        )

    data = _from_nhwc(_fwd(_to_nhwc(x.data, layout), w.data, stride, padding), layout)
    return _make("conv2d", data, (x, w), backward)


def conv2d_input_grad(g: Tensor, w: Tensor, x_shape, stride=1, padding=0, layout="NCHW") -> Tensor:
    """Transposed convolution: gradient of ``conv2d`` w.r.t. its input."""
    _check_layout(layout)
    x_shape = tuple(x_shape)
    w_shape = w.shape

    def backward(out, gz, needs):
        return (
            conv2d(gz, w, stride, padding, layout) if needs[0] else None,
            conv2d_weight_grad(gz, g, w_shape, stride, padding, layout) if needs[1] else None,
        )

    data = _input_grad(_to_nhwc(g.data, layout), w.data, _nhwc_shape(x_shape, layout), stride, padding)
    return _make("conv2d_input_grad", _from_nhwc(data, layout), (g, w), backward)


def conv2d_weight_grad(x: Tensor, g: Tensor, w_shape, stride=1, padding=0, layout="NCHW") -> Tensor:
    """Gradient of ``conv2d`` w.r.t. its kernel."""
    _check_layout(layout)
    w_shape = tuple(w_shape)
    x_shape = x.shape

    def backward(out, gu, needs):
        return (
            conv2d_input_grad(g, gu, x_shape, stride, padding, layout) if needs[0] else None,
            conv2d(x, gu, stride, padding, layout) if needs[1] else None,
        )

    data = _weight_grad(_to_nhwc(x.data, layout), _to_nhwc(g.data, layout), w_shape, stride, padding)
    return _make("conv2d_weight_grad", data, (x, g), backward)
