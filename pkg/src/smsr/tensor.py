"""Dense NCHW tensor primitives.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out as
``(n, c, h, w)``.  Runtime code uses ``float32``; every routine here keeps the
dtype of its input so the gradient-check harness can run in ``float64``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    """Return ``data`` as a contiguous rank-4 array of ``dtype``."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 4:
        raise ValueError(f"expected a rank-4 NCHW tensor, got shape {arr.shape}")
    return arr


@dataclass
class ConvSpec:
    """Kernel weights plus geometry of a 2-D convolution."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ValueError(f"kernel must be (c_out, c_in, k_h, k_w), got {self.weight.shape}")
        if self.stride < 1:
            raise ValueError("stride must be positive")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match c_out={self.weight.shape[0]}")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel_size
        return conv_output_size(h, kh, self.stride, self.padding), \
            conv_output_size(w, kw, self.stride, self.padding)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return max((size + 2 * pad - k) // stride + 1, 0)


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Lower ``x`` to a column matrix of shape ``(c*kh*kw, n*h_out*w_out)``.

    Rows are ordered ``(c, dy, dx)`` to match ``weight.reshape(c_out, -1)``;
    columns are ordered ``(n, y, x)``.
    """
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if n == 0 or c == 0 or ho == 0 or wo == 0:
        return np.zeros((c * kh * kw, n * ho * wo), dtype=x.dtype)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)


def col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int,
           stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back to an NCHW array."""
    n, c, h, w = shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    if cols.size == 0:
        return out[:, :, pad:pad + h, pad:pad + w]
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    for dy in range(kh):
        for dx in range(kw):
            out[:, :, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride] += \
                cols[:, dy, dx].transpose(1, 0, 2, 3)
    return out[:, :, pad:pad + h, pad:pad + w]


def conv2d(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None,
           stride: int = 1, padding: int = 0, counter=None) -> np.ndarray:
    """Cross-correlation of an NCHW input with zero padding, via im2col + GEMM."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv2d shape mismatch: input {x.shape} vs kernel {weight.shape}")
    n, _, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)
    wmat = weight.reshape(c_out, c_in * kh * kw)
    if counter is not None:
        counter.add(c_out * c_in * kh * kw * n * ho * wo)
    out = (wmat @ cols).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_dense(x: np.ndarray, spec: ConvSpec, counter=None) -> np.ndarray:
    return conv2d(x, spec.weight, spec.bias, spec.stride, spec.padding, counter=counter)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def pixel_shuffle(x: np.ndarray, r: int) -> np.ndarray:
    """Rearrange ``(n, c*r*r, h, w)`` into ``(n, c, h*r, w*r)``."""
    n, c, h, w = x.shape
    if r < 1 or c % (r * r):
        raise ValueError(f"channels ({c}) not divisible by r^2 ({r * r})")
    co = c // (r * r)
    out = x.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(out.reshape(n, co, h * r, w * r))


def pixel_unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    """Exact inverse permutation of :func:`pixel_shuffle`."""
    n, c, h, w = x.shape
    if r < 1 or h % r or w % r:
        raise ValueError(f"spatial size {h}x{w} not divisible by r={r}")
    out = x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(out.reshape(n, c * r * r, h // r, w // r))


def cubic(x, a: float = -0.5):
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    return np.where(
        x <= 1, (a + 2) * x3 - (a + 3) * x2 + 1,
        np.where(x < 2, a * x3 - 5 * a * x2 + 8 * a * x - 4 * a, 0.0))


def resize_weights(in_size: int, out_size: int, scale: float):
    """Per-output-sample source indices and normalized cubic weights.

    Follows the imresize convention used to build SR benchmarks: pixel
    centers are aligned, the kernel is widened by ``1/scale`` when
    downscaling, and out-of-range taps are clamped to the edge.
    """
    antialias = scale < 1
    width = 4.0 / scale if antialias else 4.0
    x = np.arange(1, out_size + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    dist = u[:, None] - idx
    if antialias:
        wts = scale * cubic(dist * scale)
    else:
        wts = cubic(dist)
    wts /= wts.sum(axis=1, keepdims=True)
    idx = np.clip(idx - 1, 0, in_size - 1).astype(np.int64)
    return idx, wts


def _resize_axis(x: np.ndarray, axis: int, out_size: int, scale: float) -> np.ndarray:
    idx, wts = resize_weights(x.shape[axis], out_size, scale)
    moved = np.moveaxis(x, axis, -1).astype(np.float64)
    out = (moved[..., idx] * wts).sum(axis=-1)
    return np.moveaxis(out, -1, axis)


def bicubic_resize(image: np.ndarray, scale: float) -> np.ndarray:
    """Bicubic resize of an NCHW tensor by ``scale`` (a = -0.5, antialiased)."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    if scale == 1:
        return image.copy()
    n, c, h, w = image.shape
    ho, wo = int(math.ceil(h * scale - 1e-9)), int(math.ceil(w * scale - 1e-9))
    out = _resize_axis(image, 2, ho, scale)
    out = _resize_axis(out, 3, wo, scale)
    return out.astype(image.dtype)


def rgb_to_luminance(image: np.ndarray) -> np.ndarray:
    """BT.601 Y channel in [16, 235] for an RGB tensor in [0, 255]."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"expected (n, 3, h, w) RGB tensor, got {image.shape}")
    img = image.astype(np.float64) / 255.0
    y = 16.0 + 65.481 * img[:, 0] + 128.553 * img[:, 1] + 24.966 * img[:, 2]
    return y[:, None].astype(image.dtype)
