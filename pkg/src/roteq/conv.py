"""2-D multi-channel spatial correlation, its adjoints, and pooling.

The forward pass lowers input patches to a column tensor (a strided
view, copied once inside the GEMM) so both the tied-filter layers and
the map-rotating reference path share one kernel. Summation order is
fixed (channel, then kernel row, then kernel column) so repeated runs
are bitwise reproducible.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConvGeometry:
    """Stride and symmetric zero padding for a correlation."""

    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.pad < 0:
            raise ValueError(f"pad must be non-negative, got {self.pad}")


def output_size(size: int, kernel: int, stride: int = 1, pad: int = 0) -> int:
    """Spatial output size floor((size + 2*pad - kernel)/stride) + 1."""
    out = (size + 2 * pad - kernel) // stride + 1
    if out < 1:
        raise ValueError(
            f"kernel {kernel} with stride {stride} does not fit input {size} (pad {pad})"
        )
    return out


def stride_preserves_equivariance(input_size: int, stride: int, kernel_size: int) -> bool:
    """True iff input_size = k*stride + kernel_size for some integer k >= 0.

    Strided windows then tile the image edge to edge, which is exactly
    the condition under which a quarter-turn of the input commutes with
    the strided correlation.
    """
    if input_size < 1 or stride < 1 or kernel_size < 1:
        raise ValueError("all sizes must be positive")
    return input_size >= kernel_size and (input_size - kernel_size) % stride == 0


def _pad_spatial(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _patches(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Strided view (n, c, kh, kw, oh, ow) over a padded input. Read-only."""
    n, c, h, w = xp.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (n, c, kh, kw, oh, ow), (s0, s1, s2, s3, s2 * stride, s3 * stride), writeable=False
    )


def correlate2d(x: np.ndarray, w: np.ndarray, geom: ConvGeometry = ConvGeometry()) -> np.ndarray:
    """Valid cross-correlation of x (n,c,h,w) with filters w (o,c,kh,kw).

    out[n,o,p,q] = sum_{c,u,v} w[o,c,u,v] * x_pad[n,c, p*stride+u, q*stride+v]
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"expected rank-4 input and filters, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels but filters expect {w.shape[1]}")
    kh, kw = w.shape[2], w.shape[3]
    output_size(x.shape[2], kh, geom.stride, geom.pad)
    output_size(x.shape[3], kw, geom.stride, geom.pad)
    xp = _pad_spatial(x, geom.pad)
    cols = _patches(xp, kh, kw, geom.stride)
    out = np.tensordot(w, cols, axes=([1, 2, 3], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def correlate2d_backward(
    grad_out: np.ndarray, x: np.ndarray, w: np.ndarray, geom: ConvGeometry = ConvGeometry()
) -> tuple[np.ndarray, np.ndarray]:
    """Adjoints of correlate2d: gradients w.r.t. the input and the filters."""
    kh, kw = w.shape[2], w.shape[3]
    oh = output_size(x.shape[2], kh, geom.stride, geom.pad)
    ow = output_size(x.shape[3], kw, geom.stride, geom.pad)
    expected = (x.shape[0], w.shape[0], oh, ow)
    if grad_out.shape != expected:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match forward output {expected}")

    xp = _pad_spatial(x, geom.pad)
    cols = _patches(xp, kh, kw, geom.stride)
    grad_w = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 4, 5]))

    grad_xp = np.zeros_like(xp)
    s = geom.stride
    for u in range(kh):
        for v in range(kw):
            # t[n,p,q,c] = sum_o grad_out[n,o,p,q] * w[o,c,u,v]
            t = np.tensordot(grad_out, w[:, :, u, v], axes=([1], [0]))
            grad_xp[:, :, u : u + oh * s : s, v : v + ow * s : s] += t.transpose(0, 3, 1, 2)
    if geom.pad:
        p = geom.pad
        grad_x = np.ascontiguousarray(grad_xp[:, :, p:-p, p:-p])
    else:
        grad_x = grad_xp
    return grad_x, grad_w


def max_pool2d(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """Windowed spatial maximum per channel."""
    output_size(x.shape[2], kernel, stride)
    output_size(x.shape[3], kernel, stride)
    cols = _patches(x, kernel, kernel, stride)
    return np.ascontiguousarray(cols.max(axis=(2, 3)))


def max_pool2d_backward(grad_out: np.ndarray, x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """Route pooled gradients to the first (row-major) maximum of each window."""
    n, c, h, w = x.shape
    oh = output_size(h, kernel, stride)
    ow = output_size(w, kernel, stride)
    cols = _patches(x, kernel, kernel, stride)
    flat = cols.reshape(n, c, kernel * kernel, oh, ow)
    winner = flat.argmax(axis=2)
    grad_x = np.zeros_like(x)
    for u in range(kernel):
        for v in range(kernel):
            mask = winner == (u * kernel + v)
            grad_x[:, :, u : u + oh * stride : stride, v : v + ow * stride : stride] += (
                grad_out * mask
            )
    return grad_x
