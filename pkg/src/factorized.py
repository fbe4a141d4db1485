"""
TensorFact - Factorized Convolution Layers

A factorized layer stores A (TS x r) and B (r x D2D1); its kernel is the
product A·B rearranged to T x S x D2 x D1. Capacity augmentation appends a
parallel branch ΔA (TS x Δr), ΔB (Δr x D2D1) whose kernel ΔK is summed with
K at the output.
"""

import copy
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Set, Tuple

import numpy as np

from .errors import ArgumentError, NumericError, ShapeError, StateError
from .tensor_core import (
    ConvGeometry,
    check_finite,
    compose_factors,
    conv2d,
    conv2d_input_grad,
    conv2d_weight_grad,
    flatten_from_kernel,
    reshape_to_kernel,
)

logger = logging.getLogger(__name__)

BASE_PARAMS = ("A", "B", "bias")
DELTA_PARAMS = ("delta_A", "delta_B")


@dataclass(frozen=True)
class ParamCount:
    """Scalar counts of one convolution layer."""

    dense: int
    factored_base: int
    factored_delta: int
    bias: int

    @property
    def total(self) -> int:
        return self.factored_base + self.factored_delta + self.bias

    def trainable(self, base_frozen: bool) -> int:
        if base_frozen:
            return self.factored_delta
        return self.total


def rank_for_alpha(t: int, s: int, d2: int, d1: int, alpha: float) -> int:
    """
    Rank of a layer under the global capacity fraction α.

    Args:
        t, s, d2, d1: Kernel shape
        alpha: Fraction of the maximal rank, in (0, 1]

    Returns:
        int: max(1, floor(alpha * min(T*S, D2*D1)))
    """
    if not 0.0 < alpha <= 1.0:
        raise ArgumentError(f"alpha must be in (0, 1], got {alpha}")
    r_max = min(t * s, d2 * d1)
    r = int(math.floor(alpha * r_max))
    if r < 1:
        logger.debug("rank clamped to 1 for a %dx%dx%dx%d kernel at alpha=%s", t, s, d2, d1, alpha)
    return max(1, r)


def delta_rank(r: int, delta_ratio: float) -> int:
    """Augmentation rank Δr = max(1, floor(delta_ratio * r))."""
    if delta_ratio <= 0:
        raise ArgumentError(f"delta_ratio must be positive, got {delta_ratio}")
    return max(1, int(math.floor(delta_ratio * r)))


def he_kernel(rng: np.random.Generator, t: int, s: int, d2: int, d1: int,
              dtype=np.float32) -> np.ndarray:
    """He-normal random kernel used as the from-scratch dense initialization."""
    std = math.sqrt(2.0 / (s * d2 * d1))
    return (rng.standard_normal((t, s, d2, d1)) * std).astype(dtype)


def same_geometry(d2: int, d1: int, stride: int = 1) -> ConvGeometry:
    return ConvGeometry(stride=stride, padding=d2 // 2, window=(d2, d1))


class FactorizedConvLayer:
    """Factor storage, augmentation branch, bias and freeze state of one layer."""

    kind = "factorized"

    def __init__(self, a: np.ndarray, b: np.ndarray, kernel_shape: Tuple[int, int, int, int],
                 bias: Optional[np.ndarray] = None, geom: Optional[ConvGeometry] = None,
                 delta_a: Optional[np.ndarray] = None, delta_b: Optional[np.ndarray] = None,
                 base_frozen: bool = False):
        t, s, d2, d1 = kernel_shape
        if min(kernel_shape) < 1:
            raise ShapeError(f"kernel shape must be positive, got {kernel_shape}")
        if a.ndim != 2 or b.ndim != 2 or a.shape[0] != t * s or b.shape[1] != d2 * d1 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"factors {a.shape} / {b.shape} do not fit kernel {kernel_shape}")
        r = a.shape[1]
        if not 1 <= r <= min(t * s, d2 * d1):
            raise ShapeError(f"rank {r} outside [1, {min(t * s, d2 * d1)}]")
        if (delta_a is None) != (delta_b is None):
            raise ShapeError("delta_A and delta_B must be both present or both absent")
        if delta_a is not None:
            if (delta_a.ndim != 2 or delta_b.ndim != 2 or delta_a.shape[0] != t * s
                    or delta_b.shape[1] != d2 * d1 or delta_a.shape[1] != delta_b.shape[0]
                    or delta_a.shape[1] < 1):
                raise ShapeError(f"augmentation factors {delta_a.shape} / {delta_b.shape} do not fit")
        self.kernel_shape = (t, s, d2, d1)
        self.A = a
        self.B = b
        self.delta_A = delta_a
        self.delta_B = delta_b
        self.bias = np.zeros(t, dtype=a.dtype) if bias is None else bias
        if self.bias.shape != (t,):
            raise ShapeError(f"bias must have shape ({t},), got {self.bias.shape}")
        self.geom = geom or same_geometry(d2, d1)
        if tuple(self.geom.window) != (d2, d1):
            raise ShapeError(f"geometry window {self.geom.window} does not match kernel {kernel_shape}")
        self.base_frozen = base_frozen

    @property
    def r(self) -> int:
        return self.A.shape[1]

    @property
    def delta_r(self) -> int:
        return 0 if self.delta_A is None else self.delta_A.shape[1]

    @property
    def dtype(self):
        return self.A.dtype

    @property
    def out_channels(self) -> int:
        return self.kernel_shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel_shape[1]

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {"A": self.A, "B": self.B}
        if self.delta_r:
            params["delta_A"] = self.delta_A
            params["delta_B"] = self.delta_B
        params["bias"] = self.bias
        return params

    def trainable_names(self) -> Set[str]:
        names = set(self.parameters())
        if self.base_frozen:
            names -= set(BASE_PARAMS)
        return names

    def copy(self) -> "FactorizedConvLayer":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "FactorizedConvLayer":
        clone = self.copy()
        for name, value in clone.parameters().items():
            setattr(clone, name, value.astype(dtype))
        return clone

    def forward(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)

    def backward(self, x: np.ndarray, upstream: np.ndarray):
        return backward_factorized(self, x, upstream)

    def effective_kernel(self) -> np.ndarray:
        k, dk = materialize(self)
        return k + dk if self.delta_r else k

    def __repr__(self):
        t, s, d2, d1 = self.kernel_shape
        return (f"<FactorizedConvLayer {t}x{s}x{d2}x{d1} r={self.r} delta_r={self.delta_r} "
                f"frozen={self.base_frozen}>")


class DenseConvLayer:
    """Ordinary convolution: used for the detection head and the dense twin."""

    kind = "dense"

    def __init__(self, kernel: np.ndarray, bias: Optional[np.ndarray] = None,
                 geom: Optional[ConvGeometry] = None, frozen: bool = False):
        if kernel.ndim != 4:
            raise ShapeError(f"dense kernel must be 4-way, got {kernel.shape}")
        self.kernel = kernel
        t, _, d2, d1 = kernel.shape
        self.bias = np.zeros(t, dtype=kernel.dtype) if bias is None else bias
        if self.bias.shape != (t,):
            raise ShapeError(f"bias must have shape ({t},), got {self.bias.shape}")
        self.geom = geom or same_geometry(d2, d1)
        self.frozen = frozen

    @property
    def kernel_shape(self):
        return tuple(self.kernel.shape)

    @property
    def dtype(self):
        return self.kernel.dtype

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    def parameters(self) -> Dict[str, np.ndarray]:
        return {"kernel": self.kernel, "bias": self.bias}

    def trainable_names(self) -> Set[str]:
        return set() if self.frozen else {"kernel", "bias"}

    def copy(self) -> "DenseConvLayer":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "DenseConvLayer":
        return DenseConvLayer(self.kernel.astype(dtype), self.bias.astype(dtype), self.geom, self.frozen)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"layer expects {self.in_channels} channels, input has {x.shape[1]}")
        return conv2d(self.kernel, x, self.geom) + self.bias[None, :, None, None]

    def backward(self, x: np.ndarray, upstream: np.ndarray):
        grads = {
            "kernel": conv2d_weight_grad(upstream, x, self.geom),
            "bias": upstream.sum(axis=(0, 2, 3)),
        }
        dx = conv2d_input_grad(upstream, self.kernel, self.geom, x.shape[2:])
        return grads, dx

    def effective_kernel(self) -> np.ndarray:
        return self.kernel

    def param_count(self) -> int:
        return self.kernel.size + self.bias.size


def svd_initialize(k0: np.ndarray, alpha: float, geom: Optional[ConvGeometry] = None,
                   bias: Optional[np.ndarray] = None) -> FactorizedConvLayer:
    """
    Factor a dense kernel with a truncated SVD.

    A = U_r Σ_r^{1/2} and B = Σ_r^{1/2} V_r^T, so A·B is the best rank-r
    approximation of the flattened kernel and the columns of A (rows of B)
    are mutually orthogonal.

    Args:
        k0: Dense kernel (T, S, D2, D1)
        alpha: Capacity fraction selecting r
        geom: Layer geometry (defaults to stride 1, same padding)
        bias: Optional bias (defaults to zeros)

    Returns:
        FactorizedConvLayer: Layer with delta_r = 0
    """
    check_finite(k0, "initial kernel")
    t, s, d2, d1 = k0.shape
    r = rank_for_alpha(t, s, d2, d1, alpha)
    m0 = flatten_from_kernel(k0).astype(np.float64)
    try:
        u, sigma, vt = np.linalg.svd(m0, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"SVD did not converge: {e}") from e
    root = np.sqrt(sigma[:r])
    a = (u[:, :r] * root).astype(k0.dtype)
    b = (root[:, None] * vt[:r]).astype(k0.dtype)
    return FactorizedConvLayer(a, b, (t, s, d2, d1), bias=None if bias is None else bias.astype(k0.dtype),
                               geom=geom)


def materialize(layer: FactorizedConvLayer) -> Tuple[np.ndarray, np.ndarray]:
    """
    Kernels of both branches.

    Returns:
        tuple: (K, ΔK); ΔK is all-zero when the layer is not augmented
    """
    t, s, d2, d1 = layer.kernel_shape
    k = reshape_to_kernel(compose_factors(layer.A, layer.B), t, s, d2, d1)
    if layer.delta_r:
        dk = reshape_to_kernel(compose_factors(layer.delta_A, layer.delta_B), t, s, d2, d1)
    else:
        dk = np.zeros_like(k)
    return k, dk


def forward(layer: FactorizedConvLayer, x: np.ndarray) -> np.ndarray:
    """
    Two-branch forward: conv(K, X) + conv(ΔK, X) + bias.

    Args:
        layer: Factorized layer
        x: Input batch (N, S, H, W)

    Returns:
        np.ndarray: Output batch (N, T, H', W')
    """
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise ShapeError(f"layer expects {layer.in_channels} channels, input has shape {x.shape}")
    k, dk = materialize(layer)
    y = conv2d(k, x, layer.geom)
    if layer.delta_r:
        y = y + conv2d(dk, x, layer.geom)
    return y + layer.bias[None, :, None, None]


def factor_grads(layer: FactorizedConvLayer, d_kernel: np.ndarray,
                 d_delta_kernel: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    """
    Chain kernel gradients back to the factors.

    Args:
        layer: Factorized layer
        d_kernel: dL/dK
        d_delta_kernel: dL/dΔK (ignored when the layer is not augmented)

    Returns:
        dict: Gradients keyed like ``layer.parameters()`` (bias excluded)
    """
    dm = flatten_from_kernel(d_kernel)
    grads = {"A": dm @ layer.B.T, "B": layer.A.T @ dm}
    if layer.delta_r and d_delta_kernel is not None:
        ddm = flatten_from_kernel(d_delta_kernel)
        grads["delta_A"] = ddm @ layer.delta_B.T
        grads["delta_B"] = layer.delta_A.T @ ddm
    return grads


def backward_factorized(layer: FactorizedConvLayer, x: np.ndarray,
                        upstream: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """
    Reverse-mode pass through one factorized layer.

    Both branches see the same input, so dK == dΔK; factor gradients follow
    from dM = flatten(dK) as dA = dM·B^T, dB = A^T·dM.

    Args:
        layer: Factorized layer
        x: Forward input (N, S, H, W)
        upstream: dL/dY, same shape as the forward output

    Returns:
        tuple: (gradients keyed by parameter name, dL/dX)
    """
    expected = (x.shape[0], layer.out_channels) + layer.geom.output_size(*x.shape[2:])
    if upstream.shape != expected:
        raise ShapeError(f"upstream shape {upstream.shape} != forward output shape {expected}")
    dk = conv2d_weight_grad(upstream, x, layer.geom)
    grads = factor_grads(layer, dk, dk if layer.delta_r else None)
    grads["bias"] = upstream.sum(axis=(0, 2, 3))
    dx = conv2d_input_grad(upstream, layer.effective_kernel(), layer.geom, x.shape[2:])
    return grads, dx


def augment_capacity(layer: FactorizedConvLayer, delta_r: int, init_seed: int) -> FactorizedConvLayer:
    """
    Append a Δr-rank parallel branch and freeze the base.

    ΔA is drawn uniform in [-1/sqrt(TS), 1/sqrt(TS)] and ΔB is zero, so
    ΔM = 0 and the augmented layer computes exactly the same function.

    Args:
        layer: Layer with delta_r == 0
        delta_r: Augmentation rank (> 0)
        init_seed: Seed for ΔA

    Returns:
        FactorizedConvLayer: New augmented layer
    """
    if layer.delta_r:
        raise StateError("layer is already augmented; only one augmentation is supported")
    if delta_r < 1:
        raise ArgumentError(f"delta_r must be > 0, got {delta_r}")
    t, s, d2, d1 = layer.kernel_shape
    rng = np.random.default_rng(init_seed)
    bound = 1.0 / math.sqrt(t * s)
    augmented = layer.copy()
    augmented.delta_A = rng.uniform(-bound, bound, size=(t * s, delta_r)).astype(layer.dtype)
    augmented.delta_B = np.zeros((delta_r, d2 * d1), dtype=layer.dtype)
    augmented.base_frozen = True
    return augmented


def freeze_base(layer: FactorizedConvLayer) -> FactorizedConvLayer:
    layer.base_frozen = True
    return layer


def unfreeze_base(layer: FactorizedConvLayer) -> FactorizedConvLayer:
    layer.base_frozen = False
    return layer


def param_counts(layer: FactorizedConvLayer) -> ParamCount:
    """
    Exact parameter accounting of a factorized layer.

    Returns:
        ParamCount: P = TSD2D1, P_fac = r(TS + D2D1), ΔP_fac = Δr(TS + D2D1), bias = T
    """
    t, s, d2, d1 = layer.kernel_shape
    return ParamCount(
        dense=t * s * d2 * d1,
        factored_base=layer.r * (t * s + d2 * d1),
        factored_delta=layer.delta_r * (t * s + d2 * d1),
        bias=t,
    )
