"""
TensorFact - Loss Functions

Complementarity loss between the base and augmentation branches, the
grid-cell detection surrogate and their combination.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from .errors import ArgumentError, ShapeError
from .tensor_core import ConvGeometry, conv2d, conv2d_input_grad, conv2d_weight_grad, p_norm

logger = logging.getLogger(__name__)

# Channel layout of the detection head output
OBJ_CHANNEL = 0
CLASS_OFFSET = 1


@dataclass
class DetectionTargets:
    """
    Per-cell training targets of a batch.

    Attributes:
        objectness: (N, G, G) 0/1 occupancy
        class_ids: (N, G, G) class index, -1 where the cell is empty
        boxes: (N, 4, G, G) normalized offsets (x-in-cell, y-in-cell, w, h)
    """

    objectness: np.ndarray
    class_ids: np.ndarray
    boxes: np.ndarray

    def __len__(self) -> int:
        return self.objectness.shape[0]

    def subset(self, index) -> "DetectionTargets":
        return DetectionTargets(self.objectness[index], self.class_ids[index], self.boxes[index])


@dataclass
class LossBreakdown:
    """Loss values of one evaluation; ``l_c`` is 0.0 when the term is off."""

    l_d: float
    l_c: float
    l_f: float
    n_samples: int = 1


def total_loss(l_d: float, l_c: float, omega_c: float) -> float:
    """L_f = L_d + ω_c·L_c."""
    return l_d + omega_c * l_c


def _per_sample_norm_grad(diff: np.ndarray, p: int) -> Tuple[np.ndarray, np.ndarray]:
    flat = diff.reshape(diff.shape[0], -1)
    if p == 1:
        norms = np.sum(np.abs(flat), axis=1)
        grad = np.sign(diff)
    elif p == 2:
        norms = np.sqrt(np.sum(np.square(flat), axis=1))
        safe = np.where(norms > 0, norms, 1.0)
        grad = diff / safe.reshape((-1,) + (1,) * (diff.ndim - 1))
        grad = np.where(norms.reshape((-1,) + (1,) * (diff.ndim - 1)) > 0, grad, 0.0).astype(diff.dtype)
    else:
        raise ArgumentError(f"unsupported norm order p={p!r}; expected 1 or 2")
    return norms, grad


def complementarity_loss(k: np.ndarray, delta_k: np.ndarray, x: np.ndarray,
                         geom: ConvGeometry, p: int) -> float:
    """
    Negative p-norm distance between base-branch and augmentation-branch activations.

    For one sample this is -||K*X - ΔK*X||_p; a batch takes the mean over samples.

    Args:
        k: Base kernel K
        delta_k: Augmentation kernel ΔK
        x: Layer input (N, S, H, W)
        geom: Layer geometry
        p: 1 or 2

    Returns:
        float: L_c <= 0
    """
    if p not in (1, 2):
        raise ArgumentError(f"unsupported norm order p={p!r}; expected 1 or 2")
    if k.shape != delta_k.shape:
        raise ShapeError(f"branch kernels differ in shape: {k.shape} vs {delta_k.shape}")
    diff = conv2d(k, x, geom) - conv2d(delta_k, x, geom)
    return -float(np.mean([p_norm(sample, p) for sample in diff]))


def complementarity_loss_and_grad(k: np.ndarray, delta_k: np.ndarray, x: np.ndarray,
                                  geom: ConvGeometry, p: int) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    L_c with its gradients.

    Args:
        k: Base kernel K
        delta_k: Augmentation kernel ΔK
        x: Layer input (N, S, H, W)
        geom: Layer geometry
        p: 1 or 2

    Returns:
        tuple: (L_c, {"kernel": dL/dK, "delta_kernel": dL/dΔK, "input": dL/dX})
    """
    if k.shape != delta_k.shape:
        raise ShapeError(f"branch kernels differ in shape: {k.shape} vs {delta_k.shape}")
    n = x.shape[0]
    diff = conv2d(k, x, geom) - conv2d(delta_k, x, geom)
    norms, grad = _per_sample_norm_grad(diff, p)
    value = -float(np.mean(norms))
    d_diff = (-grad / n).astype(diff.dtype)
    d_k = conv2d_weight_grad(d_diff, x, geom)
    grads = {
        "kernel": d_k,
        "delta_kernel": -d_k,
        "input": conv2d_input_grad(d_diff, k - delta_k, geom, x.shape[2:]),
    }
    return value, grads


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    return _sigmoid(np.asarray(z))


def _log_softmax(scores: np.ndarray, axis: int) -> np.ndarray:
    shifted = scores - scores.max(axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def detection_loss_and_grad(predictions: np.ndarray, targets: DetectionTargets,
                            classes: int) -> Tuple[float, np.ndarray]:
    """
    Grid-cell detection surrogate and its gradient w.r.t. the raw head output.

    Per image: binary cross-entropy on objectness averaged over every cell,
    class cross-entropy averaged over positive cells, and squared error of the
    sigmoid box offsets (summed over the four coordinates) averaged over
    positive cells. Images without objects contribute the objectness term
    only. The batch loss is the mean over images.

    Args:
        predictions: Raw head output (N, 5 + C, G, G)
        targets: Encoded targets
        classes: Number of classes C

    Returns:
        tuple: (L_d, dL_d/dpredictions)
    """
    n = predictions.shape[0]
    if n == 0:
        raise ArgumentError("detection loss of an empty batch")
    if predictions.shape[1] != 5 + classes:
        raise ShapeError(f"head output has {predictions.shape[1]} channels, expected {5 + classes}")
    if targets.objectness.shape != (n,) + predictions.shape[2:]:
        raise ShapeError(f"targets {targets.objectness.shape} do not match predictions {predictions.shape}")
    dtype = predictions.dtype
    cells = predictions.shape[2] * predictions.shape[3]
    grad = np.zeros_like(predictions)

    z = predictions[:, OBJ_CHANNEL]
    y = targets.objectness.astype(dtype)
    obj_loss = np.sum(np.logaddexp(0.0, z) - y * z, axis=(1, 2)) / cells
    grad[:, OBJ_CHANNEL] = (_sigmoid(z) - y) / cells

    positive = targets.class_ids >= 0
    n_pos = positive.sum(axis=(1, 2))
    weight = np.where(n_pos > 0, 1.0 / np.maximum(n_pos, 1), 0.0).astype(dtype)

    scores = predictions[:, CLASS_OFFSET: CLASS_OFFSET + classes]
    log_probs = _log_softmax(scores, axis=1)
    onehot = np.zeros_like(scores)
    img, row, col = np.nonzero(positive)
    onehot[img, targets.class_ids[positive], row, col] = 1.0
    mask = positive[:, None].astype(dtype)
    cls_loss = -np.sum(onehot * log_probs, axis=(1, 2, 3)) * weight
    grad[:, CLASS_OFFSET: CLASS_OFFSET + classes] = (
        (np.exp(log_probs) - onehot) * mask * weight[:, None, None, None]
    )

    box_offset = CLASS_OFFSET + classes
    raw = predictions[:, box_offset: box_offset + 4]
    sig = _sigmoid(raw)
    err = (sig - targets.boxes.astype(dtype)) * mask
    box_loss = np.sum(np.square(err), axis=(1, 2, 3)) * weight
    grad[:, box_offset: box_offset + 4] = 2.0 * err * sig * (1.0 - sig) * weight[:, None, None, None]

    per_image = obj_loss + cls_loss + box_loss
    return float(np.mean(per_image)), grad / n


def detection_task_loss(predictions: np.ndarray, targets: DetectionTargets, classes: int) -> float:
    return detection_loss_and_grad(predictions, targets, classes)[0]
