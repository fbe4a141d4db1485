"""
TensorFact - Training and Gradient Verification Tests
"""

import os
import sys
from types import SimpleNamespace

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.config import TrainConfig
from src.detector import COMPACT_ARCH, augment_model, build_toy_detector, encode_targets
from src.errors import ArgumentError, StateError
from src.training import (
    HISTORY_COLUMNS,
    TrainingData,
    _accumulate,
    check_gradients,
    evaluate_loss,
    finite_diff_check,
    make_gradcheck_case,
    relative_error,
    train_dense,
    train_phase1,
    train_phase2,
    write_history_log,
)
from src.utils import array_digest


def small_config(seed=0, **changes):
    base = TrainConfig(alpha=0.5, classes=3, canvas=16, seed=seed, epochs=2, epochs_phase1=2,
                       batch_size=2, accum_steps=2, lr_phase1=1e-3, lr_phase2=1e-3)
    return base.with_overrides(**changes) if changes else base


def make_data(model, n, seed):
    """Random images with one or two objects each."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(n, 1, model.canvas, model.canvas)).astype(model.dtype)
    annotations = []
    for _ in range(n):
        annotations.append([
            (int(rng.integers(0, model.classes)), *rng.uniform(0.1, 0.9, size=2), *rng.uniform(0.2, 0.5, size=2))
            for _ in range(int(rng.integers(1, 3)))
        ])
    return TrainingData(x, encode_targets(annotations, model.grid_size(), model.classes, model.dtype))


def digest(model):
    params = model.parameters()
    return array_digest(params[key] for key in sorted(params))


@pytest.fixture
def plain():
    return build_toy_detector(small_config(seed=4), arch=COMPACT_ARCH)


@pytest.fixture
def augmented(plain):
    return augment_model(plain, delta_ratio=0.5, seed=4)


class TestPhaseOne:
    """Test source-modality training."""

    def test_one_epoch_reduces_loss(self):
        """Test a single epoch on two samples lowers the loss for most seeds."""
        improved = 0
        for seed in range(5):
            config = small_config(seed=seed, epochs_phase1=1)
            model = build_toy_detector(config, arch=COMPACT_ARCH)
            data = make_data(model, 2, seed)
            before = evaluate_loss(model, data).l_d
            result = train_phase1(model, data, config)
            improved += result.best_val_loss < before
        assert improved >= 4

    def test_zero_learning_rate(self, plain):
        """Test lr = 0 keeps every parameter bit-identical."""
        data = make_data(plain, 4, 0)
        result = train_phase1(plain, data, small_config(seed=4, lr_phase1=0.0))
        assert digest(result.model) == digest(plain)

    def test_deterministic(self, plain):
        """Test identical seeds and config give identical weights."""
        data = make_data(plain, 5, 1)
        config = small_config(seed=4)
        one = train_phase1(plain, data, config)
        two = train_phase1(plain, data, config)
        assert digest(one.model) == digest(two.model)
        assert [row.l_f for row in one.history] == [row.l_f for row in two.history]

    def test_input_model_untouched(self, plain):
        """Test training works on a copy."""
        before = digest(plain)
        train_phase1(plain, make_data(plain, 3, 2), small_config(seed=4))
        assert digest(plain) == before

    def test_history_rows(self, plain):
        """Test one train and one val row per epoch."""
        result = train_phase1(plain, make_data(plain, 3, 2), small_config(seed=4, epochs_phase1=3))
        assert [(row.epoch, row.split) for row in result.history] == [
            (1, "train"), (1, "val"), (2, "train"), (2, "val"), (3, "train"), (3, "val")]
        assert 1 <= result.best_epoch <= 3
        frame = result.history_frame()
        assert list(frame.columns) == HISTORY_COLUMNS
        assert len(frame) == 6

    def test_empty_dataset(self, plain):
        """Test an empty split raises an argument error."""
        empty = SimpleNamespace(inputs=lambda dtype: np.zeros((0, 1, 16, 16), dtype=dtype), annotations=[])
        with pytest.raises(ArgumentError):
            train_phase1(plain, empty, small_config())

    def test_rejects_augmented_model(self, augmented):
        """Test phase 1 refuses an augmented model."""
        with pytest.raises(StateError):
            train_phase1(augmented, make_data(augmented, 2, 0), small_config())

    def test_dense_training_rejects_factorized(self, plain):
        """Test the dense trainer refuses factorized layers."""
        with pytest.raises(StateError):
            train_dense(plain, make_data(plain, 2, 0), small_config())

    def test_dense_training_runs(self):
        """Test the unfactorized baseline trains."""
        config = small_config(seed=1)
        dense = build_toy_detector(config, arch=COMPACT_ARCH, factorized=False)
        result = train_dense(dense, make_data(dense, 3, 0), config)
        assert result.phase == "dense"
        assert digest(result.model) != digest(dense)


class TestPhaseTwo:
    """Test augmented fine-tuning."""

    def test_requires_augmentation(self, plain):
        """Test a plain model raises a state error."""
        with pytest.raises(StateError):
            train_phase2(plain, make_data(plain, 2, 0), small_config())

    def test_base_stays_frozen(self, augmented):
        """Test every base factor and body bias keeps its bits."""
        config = small_config(seed=4, p_norm=2)
        result = train_phase2(augmented, make_data(augmented, 4, 3), config)
        trained = result.model
        for before, after in zip(augmented.factorized_layers, trained.factorized_layers):
            for name in ("A", "B", "bias"):
                assert getattr(before, name).tobytes() == getattr(after, name).tobytes()
            assert not np.array_equal(before.delta_B, after.delta_B)

    def test_frozen_head_option(self, augmented):
        """Test the head keeps its bits when head training is off."""
        config = small_config(seed=4, train_head_phase2=False)
        result = train_phase2(augmented, make_data(augmented, 3, 3), config)
        assert result.model.head.kernel.tobytes() == augmented.head.kernel.tobytes()

    def test_zero_weight_matches_absent_norm(self, augmented):
        """Test omega 0 and p absent give identical runs."""
        data = make_data(augmented, 4, 5)
        off = train_phase2(augmented, data, small_config(seed=4, omega_c=0.0, p_norm=2))
        absent = train_phase2(augmented, data, small_config(seed=4, p_norm=None))
        assert [row.l_f for row in off.history] == [row.l_f for row in absent.history]
        assert digest(off.model) == digest(absent.model)

    @pytest.mark.parametrize("p", [1, 2])
    def test_logged_complementarity_is_non_positive(self, augmented, p):
        """Test every step logs L_c <= 0."""
        result = train_phase2(augmented, make_data(augmented, 4, 6), small_config(seed=4, p_norm=p))
        assert result.step_losses
        assert all(step.l_c <= 0.0 for step in result.step_losses)
        assert any(step.l_c < 0.0 for step in result.step_losses)

    def test_history_log_file(self, augmented, tmp_path):
        """Test the log header and one line per row."""
        result = train_phase2(augmented, make_data(augmented, 2, 7), small_config(seed=4, p_norm=1))
        path = write_history_log(result.history, tmp_path / "logs" / "history.log")
        lines = path.read_text().splitlines()
        assert lines[0] == "# epoch split L_d L_c L_f lr"
        assert len(lines) == 1 + len(result.history)
        assert lines[1].split()[:2] == ["1", "train"]


class TestAccumulation:
    """Test gradient accumulation."""

    def test_weighted_groups_equal_full_batch(self, augmented):
        """Test two accumulated micro-batches equal one batch of the union."""
        model = augmented.astype(np.float64)
        data = make_data(model, 5, 8)
        index = np.arange(5)
        breakdown, acc = _accumulate(model, data, [index[:3], index[3:]], 0.01, 2, True)
        full, grads = model.loss_and_grads(data.inputs, data.targets, 0.01, 2, True)
        assert breakdown.n_samples == 5
        assert np.isclose(breakdown.l_d, full.l_d, rtol=1e-10)
        assert np.isclose(breakdown.l_c, full.l_c, rtol=1e-10)
        for key, g in grads.items():
            np.testing.assert_allclose(acc[key], g, rtol=1e-9, atol=1e-12)


class TestGradientCheck:
    """Test the finite-difference verification harness."""

    def test_relative_error_denominator(self):
        """Test the floor of the denominator."""
        assert relative_error(0.0, 0.0) == 0.0
        assert relative_error(2.0, 1.0) == 0.5
        assert relative_error(1e-10, 0.0) == pytest.approx(1e-2)

    def test_linear_objective_is_exact(self):
        """Test a model linear in its parameters."""
        coeffs = np.array([0.5, -1.25, 2.0, 0.0, 3.75])
        params = {"w": np.array([1.0, -0.5, 0.25, 2.0, -1.5])}
        result = check_gradients(lambda: float(coeffs @ params["w"]), params, {"w": coeffs.copy()})
        assert result.max_rel_error <= 1e-9
        assert result.n_checked == 5
        np.testing.assert_array_equal(params["w"], [1.0, -0.5, 0.25, 2.0, -1.5])

    @pytest.mark.parametrize("p", [None, 1, 2])
    def test_detector_gradients(self, p):
        """Test every analytic gradient of the toy detector."""
        model, sample = make_gradcheck_case(seed=0)
        omega_c = 0.01 if p else 0.0
        result = finite_diff_check(model, sample, epsilon=1e-3, omega_c=omega_c, p=p)
        assert result.n_checked == model.param_total()
        assert result.max_rel_error <= 1e-6

    def test_corrupted_gradient_is_caught(self):
        """Test doubling the B gradient of one layer is detected."""
        model, sample = make_gradcheck_case(seed=1)

        def corrupt(grads):
            grads = dict(grads)
            grads[(1, "B")] = 2.0 * grads[(1, "B")]
            return grads

        result = finite_diff_check(model, sample, omega_c=0.01, p=2, grad_transform=corrupt)
        assert result.max_rel_error > 0.3
        assert result.worst_key == (1, "B")


if __name__ == "__main__":
    pytest.main([__file__])
