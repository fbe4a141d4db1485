"""
TensorFact - Toy Detector

A stack of factorized 3x3 convolutions with leaky rectifiers and a dense
1x1 head that emits objectness, class scores and box offsets per grid cell.
"""

import copy
import math
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .config import LEAKY_SLOPE, OBJECTNESS_THRESHOLD, TrainConfig
from .errors import ConfigError, ShapeError, StateError
from .factorized import (
    DELTA_PARAMS,
    DenseConvLayer,
    FactorizedConvLayer,
    augment_capacity,
    delta_rank,
    factor_grads,
    he_kernel,
    materialize,
    param_counts,
    same_geometry,
    svd_initialize,
)
from .losses import (
    CLASS_OFFSET,
    OBJ_CHANNEL,
    DetectionTargets,
    LossBreakdown,
    complementarity_loss_and_grad,
    detection_loss_and_grad,
    sigmoid,
    total_loss,
)
from .metrics import Box, Detection
from .tensor_core import ConvGeometry, conv2d
from .utils import derive_rng

logger = logging.getLogger(__name__)

ConvLayer = Union[FactorizedConvLayer, DenseConvLayer]
ParamKey = Tuple[int, str]


@dataclass(frozen=True)
class LayerSpec:
    """One body convolution: output/input channels, square window, stride."""

    out_channels: int
    in_channels: int
    window: int = 3
    stride: int = 1


DEFAULT_ARCH = (
    LayerSpec(16, 1, 3, 2),
    LayerSpec(32, 16, 3, 2),
    LayerSpec(64, 32, 3, 2),
    LayerSpec(64, 64, 3, 1),
    LayerSpec(64, 64, 3, 1),
    LayerSpec(64, 64, 3, 1),
)

# Small stack used for gradient verification
COMPACT_ARCH = (
    LayerSpec(4, 1, 3, 2),
    LayerSpec(6, 4, 3, 1),
    LayerSpec(6, 6, 3, 2),
)


@dataclass
class ForwardCache:
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    output: np.ndarray


def validate_architecture(arch: Sequence[LayerSpec], in_channels: int = 1) -> Tuple[bool, List[str]]:
    """
    Check that a layer chain is consistent.

    Returns:
        tuple: (is_valid, error_messages)
    """
    errors = []
    if not arch:
        errors.append("architecture has no layers")
    expected = in_channels
    for i, spec in enumerate(arch):
        if min(spec.out_channels, spec.in_channels, spec.window, spec.stride) < 1:
            errors.append(f"layer {i}: sizes must be positive")
        if spec.in_channels != expected:
            errors.append(f"layer {i}: expects {spec.in_channels} input channels, previous layer gives {expected}")
        expected = spec.out_channels
    return len(errors) == 0, errors


def leaky_relu(z: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(z > 0, z, slope * z).astype(z.dtype)


def lc_layer_scale(activation_shape: Sequence[int], p: int) -> float:
    """
    Factor that turns a layer's L_c into a per-activation distance.

    A p-norm over m activations grows like m for p=1 and like sqrt(m) for
    p=2; dividing by that keeps ω_c·L_c in the range of L_d whatever the
    layer size.
    """
    m = int(np.prod(activation_shape))
    return 1.0 / m if p == 1 else 1.0 / math.sqrt(m)


class ToyDetector:
    """
    Body layers plus a 1x1 dense head.

    Parameters are addressed by ``(layer_index, name)``; the head is the last
    index.
    """

    def __init__(self, layers: Sequence[ConvLayer], head: DenseConvLayer, classes: int,
                 canvas: int, alpha: Optional[float] = None, slope: float = LEAKY_SLOPE):
        if head.out_channels != 5 + classes:
            raise ConfigError(f"head emits {head.out_channels} channels, expected {5 + classes}")
        if head.kernel_shape[2:] != (1, 1):
            raise ConfigError("head must be a 1x1 convolution")
        expected = layers[0].in_channels if layers else head.in_channels
        for i, layer in enumerate(list(layers) + [head]):
            if layer.in_channels != expected:
                raise ConfigError(f"layer {i} expects {layer.in_channels} channels, previous gives {expected}")
            expected = layer.out_channels
        self.layers = list(layers)
        self.head = head
        self.classes = classes
        self.canvas = canvas
        self.alpha = alpha
        self.slope = slope

    @property
    def all_layers(self) -> List[ConvLayer]:
        return self.layers + [self.head]

    @property
    def factorized_layers(self) -> List[FactorizedConvLayer]:
        return [layer for layer in self.layers if isinstance(layer, FactorizedConvLayer)]

    @property
    def is_factorized(self) -> bool:
        return len(self.factorized_layers) == len(self.layers)

    @property
    def is_augmented(self) -> bool:
        factorized = self.factorized_layers
        return bool(factorized) and all(layer.delta_r > 0 for layer in factorized)

    @property
    def dtype(self):
        return self.head.dtype

    def grid_size(self, height: Optional[int] = None) -> int:
        size = self.canvas if height is None else height
        for layer in self.layers:
            size = layer.geom.output_size(size, size)[0]
        return size

    def copy(self) -> "ToyDetector":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "ToyDetector":
        return ToyDetector([layer.astype(dtype) for layer in self.layers], self.head.astype(dtype),
                           self.classes, self.canvas, self.alpha, self.slope)

    def parameters(self) -> Dict[ParamKey, np.ndarray]:
        params = {}
        for i, layer in enumerate(self.all_layers):
            for name, value in layer.parameters().items():
                params[(i, name)] = value
        return params

    def trainable_keys(self) -> Set[ParamKey]:
        keys = set()
        for i, layer in enumerate(self.all_layers):
            keys.update((i, name) for name in layer.trainable_names())
        return keys

    def param_total(self) -> int:
        """Stored scalars of every layer (base, augmentation, biases, head)."""
        return int(sum(value.size for value in self.parameters().values()))

    def trainable_total(self) -> int:
        params = self.parameters()
        return int(sum(params[key].size for key in self.trainable_keys()))

    def forward(self, x: np.ndarray, keep_cache: bool = False):
        """
        Run the network.

        Args:
            x: Images (N, 1, H, W)
            keep_cache: Also return the per-layer inputs and pre-activations

        Returns:
            np.ndarray or ForwardCache: Raw head output (N, 5 + C, G, G)
        """
        if x.ndim != 4:
            raise ShapeError(f"expected a (N, C, H, W) batch, got {x.shape}")
        inputs, pre = [], []
        h = x.astype(self.dtype, copy=False)
        for layer in self.layers:
            inputs.append(h)
            z = layer.forward(h)
            pre.append(z)
            h = leaky_relu(z, self.slope)
        inputs.append(h)
        out = self.head.forward(h)
        if keep_cache:
            return ForwardCache(inputs, pre, out)
        return out

    def _lc_layers(self, lc_all_layers: bool) -> List[int]:
        indices = [i for i, layer in enumerate(self.layers)
                   if isinstance(layer, FactorizedConvLayer) and layer.delta_r > 0]
        if not indices:
            raise StateError("complementarity loss needs an augmented model")
        return indices if lc_all_layers else indices[-1:]

    def loss(self, x: np.ndarray, targets: DetectionTargets, omega_c: float = 0.0,
             p: Optional[int] = None, lc_all_layers: bool = True) -> LossBreakdown:
        """Loss values without gradients."""
        return self.loss_and_grads(x, targets, omega_c, p, lc_all_layers, need_grads=False)[0]

    def loss_and_grads(self, x: np.ndarray, targets: DetectionTargets, omega_c: float = 0.0,
                       p: Optional[int] = None, lc_all_layers: bool = True,
                       need_grads: bool = True) -> Tuple[LossBreakdown, Dict[ParamKey, np.ndarray]]:
        """
        L_f = L_d + ω_c·L_c and its gradient for every parameter.

        L_c is the mean of the per-layer complementarity losses over the
        augmented layers (or the last one only), each divided by
        ``lc_layer_scale`` so it reads as a per-activation distance. It is
        skipped when ``p`` is None or ``omega_c`` is 0.

        Args:
            x: Images (N, 1, H, W)
            targets: Encoded targets
            omega_c: Complementarity weight
            p: Norm order 1 or 2, or None
            lc_all_layers: Apply L_c at every augmented layer
            need_grads: Skip the backward pass when False

        Returns:
            tuple: (LossBreakdown, gradients keyed by parameter)
        """
        cache = self.forward(x, keep_cache=True)
        l_d, d_out = detection_loss_and_grad(cache.output, targets, self.classes)
        use_lc = p is not None and omega_c > 0
        lc_values: Dict[int, Tuple[float, Dict[str, np.ndarray]]] = {}
        if use_lc:
            indices = self._lc_layers(lc_all_layers)
            for i in indices:
                layer = self.layers[i]
                k, dk = materialize(layer)
                value, lc_grads = complementarity_loss_and_grad(k, dk, cache.inputs[i], layer.geom, p)
                scale = lc_layer_scale(cache.pre_activations[i].shape[1:], p)
                lc_values[i] = (scale * value, {name: (scale * g).astype(g.dtype) for name, g in lc_grads.items()})
        l_c = float(np.mean([v for v, _ in lc_values.values()])) if lc_values else 0.0
        breakdown = LossBreakdown(l_d=l_d, l_c=l_c, l_f=total_loss(l_d, l_c, omega_c if use_lc else 0.0),
                                  n_samples=x.shape[0])
        if not need_grads:
            return breakdown, {}

        grads: Dict[ParamKey, np.ndarray] = {}
        head_index = len(self.layers)
        head_grads, dh = self.head.backward(cache.inputs[head_index], d_out)
        for name, g in head_grads.items():
            grads[(head_index, name)] = g
        lc_weight = omega_c / len(lc_values) if lc_values else 0.0
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            z = cache.pre_activations[i]
            dz = np.where(z > 0, dh, self.slope * dh).astype(z.dtype)
            layer_grads, dx = layer.backward(cache.inputs[i], dz)
            if i in lc_values:
                lc_grads = lc_values[i][1]
                extra = factor_grads(layer, lc_grads["kernel"], lc_grads["delta_kernel"])
                for name, g in extra.items():
                    layer_grads[name] = layer_grads[name] + lc_weight * g
                dx = dx + lc_weight * lc_grads["input"]
            for name, g in layer_grads.items():
                grads[(i, name)] = g
            dh = dx
        return breakdown, grads

    def kink_signature(self, x: np.ndarray, p: Optional[int] = None, omega_c: float = 0.0,
                       lc_all_layers: bool = True) -> bytes:
        """Sign pattern of every non-smooth point the loss passes through."""
        cache = self.forward(x, keep_cache=True)
        parts = [np.packbits(z.ravel() > 0) for z in cache.pre_activations]
        if p == 1 and omega_c > 0:
            for i in self._lc_layers(lc_all_layers):
                layer = self.layers[i]
                k, dk = materialize(layer)
                diff = conv2d(k, cache.inputs[i], layer.geom) - conv2d(dk, cache.inputs[i], layer.geom)
                parts.append(np.packbits(diff.ravel() > 0))
                parts.append(np.packbits(diff.ravel() < 0))
        return b"".join(part.tobytes() for part in parts)


def build_toy_detector(config: TrainConfig, arch: Sequence[LayerSpec] = DEFAULT_ARCH,
                       dtype=np.float32, seed: Optional[int] = None, factorized: bool = True,
                       canvas: Optional[int] = None) -> ToyDetector:
    """
    Assemble a detector from He-initialized dense kernels.

    Every body kernel is factored with ``svd_initialize`` at the global α
    unless ``factorized`` is False, which keeps the dense kernels (the
    unfactorized twin).

    Args:
        config: Experiment configuration (alpha, classes, canvas, seed)
        arch: Body layer chain
        dtype: Parameter dtype
        seed: Initialization seed (defaults to config.seed)
        factorized: Factor the body layers
        canvas: Input size override

    Returns:
        ToyDetector: Freshly initialized model
    """
    is_valid, errors = validate_architecture(arch)
    if not is_valid:
        raise ConfigError("; ".join(errors))
    seed = config.seed if seed is None else seed
    layers: List[ConvLayer] = []
    for i, spec in enumerate(arch):
        rng = derive_rng(seed, 100, i)
        kernel = he_kernel(rng, spec.out_channels, spec.in_channels, spec.window, spec.window, dtype)
        geom = same_geometry(spec.window, spec.window, spec.stride)
        if factorized:
            layers.append(svd_initialize(kernel, config.alpha, geom=geom))
        else:
            layers.append(DenseConvLayer(kernel, geom=geom))
    head_rng = derive_rng(seed, 100, len(arch))
    head_kernel = he_kernel(head_rng, 5 + config.classes, arch[-1].out_channels, 1, 1, dtype)
    head = DenseConvLayer(head_kernel, geom=ConvGeometry(1, 0, (1, 1)))
    model = ToyDetector(layers, head, config.classes, canvas or config.canvas,
                        alpha=config.alpha if factorized else None)
    logger.debug("built %s detector with %d parameters", "factorized" if factorized else "dense",
                 model.param_total())
    return model


def dense_twin(model: ToyDetector) -> ToyDetector:
    """Unfactorized copy computing the same function (kernels materialized)."""
    layers = []
    for layer in model.layers:
        kernel = layer.effective_kernel() if isinstance(layer, FactorizedConvLayer) else layer.kernel
        layers.append(DenseConvLayer(kernel.copy(), layer.bias.copy(), layer.geom))
    head = model.head.copy()
    head.frozen = False
    return ToyDetector(layers, head, model.classes, model.canvas, None, model.slope)


def augment_model(model: ToyDetector, delta_ratio: float, seed: int,
                  train_head: bool = True) -> ToyDetector:
    """
    Augment every factorized layer and freeze the base.

    Each layer gets Δr = max(1, floor(delta_ratio·r)); the head stays
    trainable only when ``train_head`` is set.

    Returns:
        ToyDetector: New model computing exactly the same function
    """
    if not model.is_factorized:
        raise StateError("only factorized models can be augmented")
    layers = []
    for i, layer in enumerate(model.layers):
        init_seed = int(derive_rng(seed, 200, i).integers(0, 2**31 - 1))
        layers.append(augment_capacity(layer, delta_rank(layer.r, delta_ratio), init_seed))
    head = model.head.copy()
    head.frozen = not train_head
    return ToyDetector(layers, head, model.classes, model.canvas, model.alpha, model.slope)


def model_param_breakdown(model: ToyDetector) -> Dict[str, int]:
    """Bookkeeping of a model's scalars by role."""
    base = delta = bias = dense = 0
    for layer in model.layers:
        if isinstance(layer, FactorizedConvLayer):
            counts = param_counts(layer)
            base += counts.factored_base
            delta += counts.factored_delta
            bias += counts.bias
        else:
            dense += layer.kernel.size
            bias += layer.bias.size
    return {
        "factored_base": base,
        "factored_delta": delta,
        "dense_kernels": dense,
        "body_bias": bias,
        "head": model.head.param_count(),
        "total": base + delta + dense + bias + model.head.param_count(),
    }


def encode_targets(annotations: Sequence[Sequence], grid: int, classes: int,
                   dtype=np.float32) -> DetectionTargets:
    """
    Assign each object to the grid cell holding its center.

    Args:
        annotations: Per image, (class_id, cx, cy, w, h) tuples normalized to [0, 1]
        grid: Cells per side G
        classes: Number of classes
        dtype: Box target dtype

    Returns:
        DetectionTargets: Objectness, class ids and box offsets
    """
    n = len(annotations)
    objectness = np.zeros((n, grid, grid), dtype=np.int8)
    class_ids = np.full((n, grid, grid), -1, dtype=np.int64)
    boxes = np.zeros((n, 4, grid, grid), dtype=dtype)
    for idx, objects in enumerate(annotations):
        for class_id, cx, cy, w, h in objects:
            if not 0 <= class_id < classes:
                raise ShapeError(f"class id {class_id} outside [0, {classes})")
            col = min(int(cx * grid), grid - 1)
            row = min(int(cy * grid), grid - 1)
            if objectness[idx, row, col]:
                logger.debug("image %d: cell (%d, %d) already holds an object; keeping the first", idx, row, col)
                continue
            objectness[idx, row, col] = 1
            class_ids[idx, row, col] = class_id
            boxes[idx, :, row, col] = (cx * grid - col, cy * grid - row, w, h)
    return DetectionTargets(objectness, class_ids, boxes)


def decode_predictions(output: np.ndarray, image_ids: Sequence[int], canvas: int, classes: int,
                       threshold: float = OBJECTNESS_THRESHOLD) -> List[Detection]:
    """
    One detection per cell whose objectness reaches the threshold.

    Args:
        output: Raw head output (N, 5 + C, G, G)
        image_ids: Image id per batch entry
        canvas: Image size in pixels
        classes: Number of classes
        threshold: Objectness threshold

    Returns:
        list: Detections in pixel coordinates, clipped to the canvas
    """
    detections = []
    grid = output.shape[2]
    obj = sigmoid(output[:, OBJ_CHANNEL].astype(np.float64))
    scores = output[:, CLASS_OFFSET: CLASS_OFFSET + classes]
    box_raw = sigmoid(output[:, CLASS_OFFSET + classes: CLASS_OFFSET + classes + 4].astype(np.float64))
    for n, image_id in enumerate(image_ids):
        rows, cols = np.nonzero(obj[n] >= threshold)
        for row, col in zip(rows, cols):
            tx, ty, tw, th = box_raw[n, :, row, col]
            cx = (col + tx) / grid * canvas
            cy = (row + ty) / grid * canvas
            w, h = tw * canvas, th * canvas
            box = Box(max(cx - w / 2, 0.0), max(cy - h / 2, 0.0),
                      min(cx + w / 2, float(canvas)), min(cy + h / 2, float(canvas)))
            detections.append(Detection(int(image_id), int(np.argmax(scores[n, :, row, col])), box,
                                        float(obj[n, row, col])))
    return detections


def predict(model: ToyDetector, images: np.ndarray, image_ids: Optional[Sequence[int]] = None,
            batch_size: int = 16) -> List[Detection]:
    """Batched inference and decoding."""
    ids = list(range(len(images))) if image_ids is None else list(image_ids)
    detections = []
    for start in range(0, len(images), batch_size):
        out = model.forward(images[start: start + batch_size])
        detections.extend(decode_predictions(out, ids[start: start + batch_size], model.canvas, model.classes))
    return detections
