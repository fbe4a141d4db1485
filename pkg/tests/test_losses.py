"""
TensorFact - Loss Function Tests
"""

import math
import os
import sys

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.errors import ArgumentError, ShapeError
from src.losses import (
    DetectionTargets,
    complementarity_loss,
    complementarity_loss_and_grad,
    detection_loss_and_grad,
    detection_task_loss,
    total_loss,
)
from src.tensor_core import ConvGeometry


def scalar_detection_loss(pred, targets, classes):
    """Loop-by-loop restatement of the three surrogate terms."""
    n, _, g_rows, g_cols = pred.shape
    per_image = []
    for i in range(n):
        obj = 0.0
        cls = 0.0
        box = 0.0
        positives = 0
        for r in range(g_rows):
            for c in range(g_cols):
                z = pred[i, 0, r, c]
                y = float(targets.objectness[i, r, c])
                p = 1.0 / (1.0 + math.exp(-z))
                obj -= y * math.log(p) + (1.0 - y) * math.log(1.0 - p)
                label = targets.class_ids[i, r, c]
                if label >= 0:
                    positives += 1
                    scores = pred[i, 1:1 + classes, r, c]
                    cls -= scores[label] - math.log(sum(math.exp(s) for s in scores))
                    for j in range(4):
                        sig = 1.0 / (1.0 + math.exp(-pred[i, 1 + classes + j, r, c]))
                        box += (sig - targets.boxes[i, j, r, c]) ** 2
        total = obj / (g_rows * g_cols)
        if positives:
            total += (cls + box) / positives
        per_image.append(total)
    return sum(per_image) / n


def random_targets(rng, n, grid, classes):
    objectness = (rng.random((n, grid, grid)) < 0.3).astype(np.int8)
    class_ids = np.where(objectness == 1, rng.integers(0, classes, size=(n, grid, grid)), -1)
    boxes = rng.random((n, 4, grid, grid)) * objectness[:, None]
    return DetectionTargets(objectness, class_ids, boxes)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestComplementarityLoss:
    """Test the branch-distance term."""

    def test_identical_branches(self, rng):
        """Test delta K == K gives zero."""
        k = rng.normal(size=(2, 2, 3, 3))
        x = rng.normal(size=(2, 2, 5, 5))
        assert complementarity_loss(k, k.copy(), x, ConvGeometry(1, 1, (3, 3)), 2) == 0.0

    def test_three_four_five(self):
        """Test activations [3, 0] against [0, 4] under p = 2 and p = 1."""
        k = np.array([3.0, 0.0]).reshape(2, 1, 1, 1)
        dk = np.array([0.0, 4.0]).reshape(2, 1, 1, 1)
        x = np.ones((1, 1, 1, 1))
        assert complementarity_loss(k, dk, x, ConvGeometry(), 2) == -5.0
        assert complementarity_loss(k, dk, x, ConvGeometry(), 1) == -7.0

    def test_never_positive(self, rng):
        """Test L_c <= 0 for random branches."""
        for _ in range(5):
            k, dk = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(3, 2, 3, 3))
            x = rng.normal(size=(3, 2, 4, 4))
            for p in (1, 2):
                assert complementarity_loss(k, dk, x, ConvGeometry(1, 1, (3, 3)), p) <= 0.0

    def test_batch_mean_over_samples(self, rng):
        """Test the batch value is the mean of per-sample values."""
        k, dk = rng.normal(size=(2, 1, 3, 3)), rng.normal(size=(2, 1, 3, 3))
        x = rng.normal(size=(3, 1, 5, 5))
        geom = ConvGeometry(1, 1, (3, 3))
        singles = [complementarity_loss(k, dk, x[i:i + 1], geom, 2) for i in range(3)]
        assert np.isclose(complementarity_loss(k, dk, x, geom, 2), np.mean(singles))

    def test_unsupported_order(self, rng):
        """Test p outside {1, 2}."""
        k = rng.normal(size=(1, 1, 1, 1))
        with pytest.raises(ArgumentError):
            complementarity_loss(k, k, np.ones((1, 1, 2, 2)), ConvGeometry(), 3)

    def test_shape_mismatch(self):
        """Test branch kernels of different shapes."""
        with pytest.raises(ShapeError):
            complementarity_loss(np.ones((1, 1, 1, 1)), np.ones((2, 1, 1, 1)), np.ones((1, 1, 2, 2)),
                                 ConvGeometry(), 2)

    @pytest.mark.parametrize("p", [1, 2])
    def test_gradients_match_central_differences(self, rng, p):
        """Test kernel, branch and input gradients."""
        geom = ConvGeometry(1, 1, (3, 3))
        k, dk = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 2, 3, 3))
        x = rng.normal(size=(2, 2, 4, 4))
        value, grads = complementarity_loss_and_grad(k, dk, x, geom, p)
        assert np.isclose(value, complementarity_loss(k, dk, x, geom, p))
        np.testing.assert_allclose(grads["delta_kernel"], -grads["kernel"])
        eps = 1e-6
        for name, tensor in (("kernel", k), ("delta_kernel", dk), ("input", x)):
            for idx in [(0, 0, 0, 0), (1, 1, 2, 2), (0, 1, 1, 2)]:
                saved = tensor[idx]
                tensor[idx] = saved + eps
                up = complementarity_loss(k, dk, x, geom, p)
                tensor[idx] = saved - eps
                down = complementarity_loss(k, dk, x, geom, p)
                tensor[idx] = saved
                assert np.isclose(grads[name][idx], (up - down) / (2 * eps), rtol=1e-4, atol=1e-6)


class TestTotalLoss:
    """Test the weighted combination."""

    def test_published_weight(self):
        """Test L_d = 1, L_c = -5 at omega 0.01."""
        assert np.isclose(total_loss(1.0, -5.0, 0.01), 0.95)

    def test_zero_weight_or_zero_term(self):
        """Test both degenerate cases reduce to L_d."""
        assert total_loss(2.5, -3.0, 0.0) == 2.5
        assert total_loss(2.5, 0.0, 0.01) == 2.5


class TestDetectionLoss:
    """Test the grid-cell detection surrogate."""

    def test_perfect_predictions(self):
        """Test confident correct predictions reach the minimum."""
        classes, grid = 3, 4
        objectness = np.zeros((1, grid, grid), dtype=np.int8)
        objectness[0, 1, 2] = 1
        class_ids = np.full((1, grid, grid), -1)
        class_ids[0, 1, 2] = 2
        boxes = np.zeros((1, 4, grid, grid))
        boxes[0, :, 1, 2] = [0.25, 0.5, 0.3, 0.6]
        targets = DetectionTargets(objectness, class_ids, boxes)
        pred = np.zeros((1, 5 + classes, grid, grid))
        pred[0, 0] = np.where(objectness[0] == 1, 40.0, -40.0)
        pred[0, 1 + 2, 1, 2] = 40.0
        pred[0, 4:8, 1, 2] = np.log(boxes[0, :, 1, 2] / (1.0 - boxes[0, :, 1, 2]))
        assert detection_task_loss(pred, targets, classes) <= 1e-6

    def test_uniform_objectness_without_targets(self):
        """Test logits of zero on an empty image cost ln 2."""
        grid = 3
        targets = DetectionTargets(np.zeros((2, grid, grid), dtype=np.int8), np.full((2, grid, grid), -1),
                                   np.zeros((2, 4, grid, grid)))
        loss = detection_task_loss(np.zeros((2, 7, grid, grid)), targets, 2)
        assert np.isclose(loss, math.log(2.0))

    def test_matches_scalar_reimplementation(self, rng):
        """Test against a loop restatement of the three terms."""
        classes, grid = 3, 4
        targets = random_targets(rng, 3, grid, classes)
        pred = rng.normal(size=(3, 5 + classes, grid, grid))
        assert np.isclose(detection_task_loss(pred, targets, classes),
                          scalar_detection_loss(pred, targets, classes), rtol=1e-10)

    def test_gradient_matches_central_differences(self, rng):
        """Test the head-output gradient entrywise."""
        classes, grid = 2, 3
        targets = random_targets(rng, 2, grid, classes)
        targets.objectness[0, 0, 0] = 1
        targets.class_ids[0, 0, 0] = 1
        pred = rng.normal(size=(2, 5 + classes, grid, grid))
        _, grad = detection_loss_and_grad(pred, targets, classes)
        eps = 1e-6
        for idx in np.ndindex(pred.shape):
            saved = pred[idx]
            pred[idx] = saved + eps
            up = detection_task_loss(pred, targets, classes)
            pred[idx] = saved - eps
            down = detection_task_loss(pred, targets, classes)
            pred[idx] = saved
            assert np.isclose(grad[idx], (up - down) / (2 * eps), rtol=1e-4, atol=1e-8)

    def test_empty_batch(self):
        """Test an empty batch raises an argument error."""
        targets = DetectionTargets(np.zeros((0, 2, 2), dtype=np.int8), np.zeros((0, 2, 2), dtype=int),
                                   np.zeros((0, 4, 2, 2)))
        with pytest.raises(ArgumentError):
            detection_task_loss(np.zeros((0, 7, 2, 2)), targets, 2)

    def test_channel_count_checked(self, rng):
        """Test head output with the wrong channel count."""
        targets = random_targets(rng, 1, 2, 2)
        with pytest.raises(ShapeError):
            detection_task_loss(np.zeros((1, 6, 2, 2)), targets, 2)

    def test_subset_of_targets(self, rng):
        """Test batch slicing of targets."""
        targets = random_targets(rng, 4, 3, 2)
        part = targets.subset(np.array([1, 3]))
        assert len(part) == 2
        np.testing.assert_array_equal(part.class_ids, targets.class_ids[[1, 3]])


if __name__ == "__main__":
    pytest.main([__file__])
