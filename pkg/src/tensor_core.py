"""
TensorFact - Tensor Primitives

Matrices and 4-way tensors are plain row-major ``numpy`` arrays. A kernel is
``(T, S, D2, D1)``, an activation batch is ``(N, C, H, W)``.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, NumericError, ShapeError

logger = logging.getLogger(__name__)

FLOAT32 = np.float32
FLOAT64 = np.float64
DEFAULT_DTYPE = FLOAT32


@dataclass(frozen=True)
class ConvGeometry:
    """Stride, symmetric zero-padding and spatial window of a convolution."""

    stride: int = 1
    padding: int = 0
    window: Tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.stride < 1:
            raise ArgumentError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ArgumentError(f"padding must be >= 0, got {self.padding}")
        if len(self.window) != 2 or min(self.window) < 1:
            raise ArgumentError(f"window must be two positive sizes, got {self.window}")

    def output_size(self, height: int, width: int) -> Tuple[int, int]:
        """
        Spatial size of the convolution output.

        Args:
            height: Input height H
            width: Input width W

        Returns:
            tuple: (H', W')

        Raises:
            ShapeError: If the output would be empty
        """
        d2, d1 = self.window
        out_h = (height + 2 * self.padding - d2) // self.stride + 1
        out_w = (width + 2 * self.padding - d1) // self.stride + 1
        if out_h < 1 or out_w < 1 or height + 2 * self.padding < d2 or width + 2 * self.padding < d1:
            raise ShapeError(f"geometry {self} yields an empty output for a {height}x{width} input")
        return out_h, out_w


def check_finite(array: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise NumericError(f"{what} contains NaN or Inf")
    return array


def compose_factors(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Form the intermediate matrix M = A·B.

    Args:
        a: Left factor (TS x r)
        b: Right factor (r x D2D1)

    Returns:
        np.ndarray: M (TS x D2D1)
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot compose factors of shapes {a.shape} and {b.shape}")
    return check_finite(a @ b, "composed factors")


def reshape_to_kernel(m: np.ndarray, t: int, s: int, d2: int, d1: int) -> np.ndarray:
    """
    Rearrange a TS x D2D1 matrix into a T x S x D2 x D1 kernel.

    Row ``t*S + s`` and column ``d2*D1 + d1`` (0-based) land at
    ``K[t, s, d2, d1]``, which is exactly the row-major reshape.
    """
    if m.ndim != 2 or m.shape != (t * s, d2 * d1):
        raise ShapeError(f"matrix of shape {m.shape} cannot hold a {t}x{s}x{d2}x{d1} kernel")
    return np.ascontiguousarray(m).reshape(t, s, d2, d1).copy()


def flatten_from_kernel(k: np.ndarray) -> np.ndarray:
    """Inverse of ``reshape_to_kernel``."""
    if k.ndim != 4:
        raise ShapeError(f"expected a 4-way kernel, got shape {k.shape}")
    t, s, d2, d1 = k.shape
    return np.ascontiguousarray(k).reshape(t * s, d2 * d1).copy()


def _windows(x: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Strided view (N, S, H', W', D2, D1) of every receptive field."""
    out_h, out_w = geom.output_size(x.shape[2], x.shape[3])
    p = geom.padding
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    view = sliding_window_view(x, geom.window, axis=(2, 3))
    return view[:, :, :: geom.stride, :: geom.stride][:, :, :out_h, :out_w]


def _check_conv_operands(k: np.ndarray, x: np.ndarray, geom: ConvGeometry) -> None:
    if k.ndim != 4 or x.ndim != 4:
        raise ShapeError(f"conv2d needs 4-way operands, got {k.shape} and {x.shape}")
    if k.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel expects {k.shape[1]} input channels, input has {x.shape[1]}")
    if tuple(k.shape[2:]) != tuple(geom.window):
        raise ShapeError(f"kernel window {k.shape[2:]} does not match geometry window {geom.window}")


def conv2d(k: np.ndarray, x: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """
    Cross-correlate a batch with a kernel.

    Args:
        k: Kernel (T, S, D2, D1)
        x: Input batch (N, S, H, W)
        geom: Stride/padding/window

    Returns:
        np.ndarray: Output batch (N, T, H', W')
    """
    _check_conv_operands(k, x, geom)
    cols = _windows(x, geom)
    y = np.tensordot(cols, k, axes=([1, 4, 5], [1, 2, 3]))
    return check_finite(np.ascontiguousarray(y.transpose(0, 3, 1, 2)), "conv2d output")


def conv2d_weight_grad(upstream: np.ndarray, x: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """
    Gradient of a scalar loss w.r.t. the kernel of ``conv2d``.

    Args:
        upstream: dL/dY (N, T, H', W')
        x: Forward input (N, S, H, W)
        geom: Forward geometry

    Returns:
        np.ndarray: dL/dK (T, S, D2, D1)
    """
    cols = _windows(x, geom)
    if cols.shape[:1] + cols.shape[2:4] != upstream.shape[:1] + upstream.shape[2:]:
        raise ShapeError(f"upstream {upstream.shape} does not match forward output of {x.shape}")
    dk = np.tensordot(upstream, cols, axes=([0, 2, 3], [0, 2, 3]))
    return check_finite(np.ascontiguousarray(dk), "kernel gradient")


def conv2d_input_grad(upstream: np.ndarray, k: np.ndarray, geom: ConvGeometry,
                      input_hw: Tuple[int, int]) -> np.ndarray:
    """
    Gradient w.r.t. the input of ``conv2d`` (a transposed convolution).

    Args:
        upstream: dL/dY (N, T, H', W')
        k: Kernel (T, S, D2, D1)
        geom: Forward geometry
        input_hw: Forward input spatial size (H, W)

    Returns:
        np.ndarray: dL/dX (N, S, H, W)
    """
    height, width = input_hw
    out_h, out_w = geom.output_size(height, width)
    n, t = upstream.shape[:2]
    if upstream.shape[2:] != (out_h, out_w) or t != k.shape[0]:
        raise ShapeError(f"upstream {upstream.shape} does not match kernel {k.shape} on {input_hw}")
    _, s, d2_size, d1_size = k.shape
    stride, pad = geom.stride, geom.padding
    dtype = np.result_type(upstream, k)
    dxp = np.zeros((n, s, height + 2 * pad, width + 2 * pad), dtype=dtype)
    for d2 in range(d2_size):
        rows = slice(d2, d2 + stride * (out_h - 1) + 1, stride)
        for d1 in range(d1_size):
            contrib = np.tensordot(upstream, k[:, :, d2, d1], axes=([1], [0]))
            dxp[:, :, rows, d1: d1 + stride * (out_w - 1) + 1: stride] += contrib.transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad: pad + height, pad: pad + width]
    return check_finite(np.ascontiguousarray(dx), "input gradient")


def p_norm(tensor: np.ndarray, p: int) -> float:
    """
    Entrywise p-norm over every element.

    Args:
        tensor: Any array
        p: 1 or 2

    Returns:
        float: Norm value
    """
    if p == 1:
        return float(np.sum(np.abs(tensor)))
    if p == 2:
        return float(np.sqrt(np.sum(np.square(tensor, dtype=np.float64))))
    raise ArgumentError(f"unsupported norm order p={p!r}; expected 1 or 2")
