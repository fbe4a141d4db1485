"""
TensorFact - Experiment Pipeline Tests
"""

import os
import sys
from decimal import Decimal

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.config import TrainConfig
from src.errors import ArgumentError
from src.experiment import (
    augmented_beats_frozen,
    generate_datasets,
    ratio_label,
    run_experiment,
    scene_spec,
    seed_sweep,
)
from src.factorized import param_counts
from src.report import ExperimentReport, ModelResult

slow = pytest.mark.skipif(os.environ.get("TENSORFACT_RUN_SLOW") != "1",
                          reason="set TENSORFACT_RUN_SLOW=1 to run full protocol checks")


@pytest.fixture
def tiny():
    return TrainConfig.reference().with_overrides(
        canvas=32, n_train_a=6, n_val=4, n_pool_b=20, train_frac_b=0.25, epochs=1, epochs_phase1=1,
        batch_size=4, alpha=0.5)


class TestPipeline:
    """Test the two-phase protocol end to end at toy scale."""

    def test_scene_grid_follows_canvas(self, tiny):
        """Test scenes use one cell per 8 pixels and fit the canvas."""
        spec = scene_spec(tiny, "B")
        assert (spec.grid, spec.max_size, spec.modality) == (4, 16, "B")
        assert scene_spec(TrainConfig(), "A").grid == 16

    def test_splits(self, tiny):
        """Test split sizes and the scarce modality-B selection."""
        data = generate_datasets(tiny)
        assert {key: len(value) for key, value in data.items()} == {
            "a_train": 6, "a_val": 4, "b_train": 5, "b_val": 4}
        assert data["b_train"].modality == "B" and data["a_train"].modality == "A"

    def test_baseline_only(self, tiny):
        """Test the pipeline subset stops after the phase-1 evaluation."""
        artifacts = run_experiment(tiny, baseline_only=True)
        assert [row.name for row in artifacts.report.rows] == ["phase1", "phase1-frozen"]
        frozen = artifacts.report.row("phase1-frozen")
        assert frozen.modality == "B"
        assert 0.0 <= frozen.map50 <= 1.0 and 0.0 <= frozen.map50_95 <= 1.0

    def test_full_run_writes_outputs(self, tiny, tmp_path):
        """Test report, history logs, weights and plots."""
        artifacts = run_experiment(tiny.with_overrides(p_norm=2), tmp_path, plots=True)
        report = artifacts.report
        assert [row.name for row in report.rows] == ["phase1", "phase1-frozen", "augmented"]
        augmented = report.row("augmented")
        phase1 = report.row("phase1")
        increase = sum(param_counts(layer).factored_delta for layer in artifacts.models["augmented"].layers)
        assert augmented.total_params == phase1.total_params + increase
        assert augmented.trainable_params < augmented.total_params
        text = (tmp_path / "report.txt").read_text()
        assert "[model.augmented]" in text
        assert f"config_hash = {tiny.with_overrides(p_norm=2).config_hash()}" in text
        for name in ("phase1", "augmented"):
            assert (tmp_path / f"history_{name}.log").exists()
            assert (tmp_path / f"{name}.tfw").exists()
        assert (tmp_path / "history.png").exists()
        assert all(step.l_c <= 0.0 for step in artifacts.histories["augmented"].step_losses)

    def test_ablation_and_dense_rows(self, tiny):
        """Test the regularization ablation and the unfactorized baseline rows."""
        artifacts = run_experiment(tiny, ablate=True, dense_baseline=True)
        names = [row.name for row in artifacts.report.rows]
        assert names == ["phase1", "phase1-frozen", "augmented-nolc", "augmented-l1", "augmented-l2",
                         "dense-phase1", "dense-finetuned"]
        dense = artifacts.report.row("dense-phase1")
        assert str(dense.compression) == "0.0000"
        assert artifacts.report.metadata["n_train_b"] == 5

    def test_capacity_sweeps(self, tiny):
        """Test alpha and augmentation-ratio sweeps add their own rows."""
        artifacts = run_experiment(tiny, alphas=(0.9,), delta_ratios=(1 / 9, 0.5))
        report = artifacts.report
        assert [row.name for row in report.rows] == ["phase1", "phase1-frozen", "phase1-alpha0.9", "augmented",
                                                     "augmented-dr1-9", "augmented-dr1-2"]
        wide = report.row("phase1-alpha0.9")
        assert wide.modality == "A"
        assert wide.total_params > report.row("phase1").total_params
        assert report.row("augmented-dr1-9").total_params == report.row("augmented").total_params
        assert report.row("augmented-dr1-2").total_params > report.row("augmented-dr1-9").total_params
        assert [layer.delta_r for layer in artifacts.models["augmented-dr1-2"].layers] == [2] * 6

    def test_sweep_values_checked(self, tiny):
        """Test out-of-range sweep values are rejected before any work."""
        with pytest.raises(ArgumentError):
            run_experiment(tiny, alphas=(1.5,))
        with pytest.raises(ArgumentError):
            run_experiment(tiny, delta_ratios=(0.0,))

    def test_ratio_label(self):
        """Test ratio labels read as the augmentation ratio."""
        assert ratio_label(1 / 9) == "1-9"
        assert ratio_label(0.25) == "1-4"

    def test_reproducible(self, tiny):
        """Test identical seeds give identical reports."""
        one = run_experiment(tiny, baseline_only=True).report
        two = run_experiment(tiny, baseline_only=True).report
        assert one.to_text() == two.to_text()


class TestTrendHelpers:
    """Test the helpers behind the cross-seed checks."""

    def test_strict_comparison(self):
        """Test a tie with the frozen model does not count as a win."""
        report = ExperimentReport(rows=[
            ModelResult("phase1-frozen", "B", 10, 10, Decimal("0"), 0.5, 0.2),
            ModelResult("augmented", "B", 12, 2, Decimal("0"), 0.5, 0.3),
        ])
        assert not augmented_beats_frozen(report)
        report.rows[1].map50 = 0.51
        assert augmented_beats_frozen(report)


@pytest.mark.slow
@slow
class TestProtocolTrends:
    """Full-size protocol checks (minutes of compute)."""

    def test_augmented_beats_frozen_across_seeds(self):
        """Test phase-2 training beats the frozen phase-1 model and L_1 keeps up with no regularizer."""
        reports = seed_sweep(TrainConfig.reference(), [0, 1, 2, 3], ablate=True)
        wins = [augmented_beats_frozen(report, "augmented-nolc") for report in reports.values()]
        assert sum(wins) >= 3
        unregularized = np.mean([r.row("augmented-nolc").map50 for r in reports.values()])
        l1 = np.mean([r.row("augmented-l1").map50 for r in reports.values()])
        assert l1 >= unregularized - 0.01


if __name__ == "__main__":
    pytest.main([__file__])
