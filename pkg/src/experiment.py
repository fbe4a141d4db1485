"""
TensorFact - Experiment Pipeline

generate -> phase 1 on modality A -> augment -> phase 2 on scarce modality B
-> evaluate, with optional regularization ablation, capacity sweeps and
dense baselines.
"""

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import __version__
from .anchors import kmeanspp_anchors
from .config import TrainConfig
from .dataset import SceneSpec, SyntheticDataset, class_distribution, generate_dataset, save_dataset, scarce_split
from .detector import ToyDetector, augment_model, build_toy_detector, predict
from .errors import ArgumentError
from .metrics import EvaluationResult, evaluate_detections
from .report import ExperimentReport, model_result
from .training import TrainResult, train_dense, train_phase1, train_phase2, write_history_log
from .visuals import plot_history, plot_pr_curves
from .weights import save_weights

logger = logging.getLogger(__name__)

ABLATION_VARIANTS = ((None, "augmented-nolc"), (1, "augmented-l1"), (2, "augmented-l2"))


def scene_spec(config: TrainConfig, modality: str) -> SceneSpec:
    """Scene parameters matching the detector grid (one cell per 8 pixels)."""
    max_size = min(SceneSpec.max_size, config.canvas // 2)
    return SceneSpec(canvas=config.canvas, classes=config.classes, modality=modality,
                     min_size=min(SceneSpec.min_size, max_size), max_size=max_size, grid=config.canvas // 8)


def generate_datasets(config: TrainConfig, n_jobs: int = 1) -> Dict[str, SyntheticDataset]:
    """
    All splits of one run.

    Returns:
        dict: ``a_train``, ``a_val``, ``b_train`` (scarce selection), ``b_val``
    """
    spec_a = scene_spec(config, "A")
    spec_b = scene_spec(config, "B")
    return {
        "a_train": generate_dataset(spec_a, config.n_train_a, config.seed, "train", n_jobs=n_jobs),
        "a_val": generate_dataset(spec_a, config.n_val, config.seed, "val", n_jobs=n_jobs),
        "b_train": scarce_split(spec_b, config.n_pool_b, config.n_train_b, config.seed, n_jobs=n_jobs),
        "b_val": generate_dataset(spec_b, config.n_val, config.seed, "val", n_jobs=n_jobs),
    }


def evaluate_model(model: ToyDetector, dataset: SyntheticDataset) -> EvaluationResult:
    """mAP 50 and mAP 50-95 of a model on a dataset split."""
    detections = predict(model, dataset.inputs(model.dtype), dataset.image_ids)
    return evaluate_detections(detections, dataset.ground_truth(), classes=range(model.classes))


@dataclass
class ExperimentArtifacts:
    report: ExperimentReport
    histories: Dict[str, TrainResult] = field(default_factory=dict)
    evaluations: Dict[str, EvaluationResult] = field(default_factory=dict)
    models: Dict[str, ToyDetector] = field(default_factory=dict)


def ratio_label(delta_ratio: float) -> str:
    """``1-9`` for a Δr:r ratio of 1:9."""
    fraction = Fraction(delta_ratio).limit_denominator(100)
    return f"{fraction.numerator}-{fraction.denominator}"


def _add_row(artifacts: ExperimentArtifacts, name: str, modality: str, result: TrainResult,
             dataset: SyntheticDataset, baseline: int) -> None:
    evaluation = evaluate_model(result.model, dataset)
    artifacts.histories[name] = result
    artifacts.models[name] = result.model
    artifacts.evaluations[name] = evaluation
    artifacts.report.rows.append(model_result(name, modality, result.model, evaluation, baseline))


def run_experiment(config: TrainConfig, out_dir: Optional[Union[str, Path]] = None, ablate: bool = False,
                   dense_baseline: bool = False, baseline_only: bool = False, plots: bool = False,
                   save_data: bool = False, n_jobs: int = 1, alphas: Sequence[float] = (),
                   delta_ratios: Sequence[float] = ()) -> ExperimentArtifacts:
    """
    Run the full two-phase protocol.

    Args:
        config: Experiment configuration
        out_dir: Where the report, history logs and weights go (nothing is written when None)
        ablate: Train phase 2 without L_c, with L_1 and with L_2
        dense_baseline: Add the unfactorized twin trained on A and fine-tuned on B
        baseline_only: Stop after evaluating the phase-1 models
        plots: Write PR-curve and history PNGs
        save_data: Also write the generated datasets
        n_jobs: joblib workers for dataset rendering
        alphas: Extra capacity fractions; each trains its own phase-1 model, evaluated on A
        delta_ratios: Extra Δr:r ratios; each augments the main phase-1 model and trains phase 2

    Returns:
        ExperimentArtifacts: Report plus intermediate results
    """
    if any(not 0.0 < alpha <= 1.0 for alpha in alphas):
        raise ArgumentError(f"sweep alphas must lie in (0, 1], got {list(alphas)}")
    if any(ratio <= 0 for ratio in delta_ratios):
        raise ArgumentError(f"sweep delta ratios must be positive, got {list(delta_ratios)}")
    data = generate_datasets(config, n_jobs)
    baseline = build_toy_detector(config, factorized=False).param_total()
    artifacts = ExperimentArtifacts(ExperimentReport())
    report = artifacts.report

    model = build_toy_detector(config)
    phase1 = train_phase1(model, data["a_train"], config, data["a_val"])
    _add_row(artifacts, "phase1", "A", phase1, data["a_val"], baseline)
    frozen = evaluate_model(phase1.model, data["b_val"])
    artifacts.evaluations["phase1-frozen"] = frozen
    report.rows.append(model_result("phase1-frozen", "B", phase1.model, frozen, baseline))

    for alpha in alphas:
        swept_config = config.with_overrides(alpha=alpha)
        swept = train_phase1(build_toy_detector(swept_config), data["a_train"], swept_config, data["a_val"])
        _add_row(artifacts, f"phase1-alpha{alpha:g}", "A", swept, data["a_val"], baseline)

    if not baseline_only:
        augmented = augment_model(phase1.model, config.delta_ratio, config.seed, config.train_head_phase2)
        variants = ABLATION_VARIANTS if ablate else ((config.p_norm, "augmented"),)
        for p, name in variants:
            result = train_phase2(augmented, data["b_train"], config.with_overrides(p_norm=p), data["b_val"])
            _add_row(artifacts, name, "B", result, data["b_val"], baseline)
        for ratio in delta_ratios:
            widened = augment_model(phase1.model, ratio, config.seed, config.train_head_phase2)
            result = train_phase2(widened, data["b_train"], config, data["b_val"])
            _add_row(artifacts, f"augmented-dr{ratio_label(ratio)}", "B", result, data["b_val"], baseline)

    if dense_baseline:
        dense = build_toy_detector(config, factorized=False)
        dense_a = train_dense(dense, data["a_train"], config, data["a_val"], phase="dense")
        dense_b = train_dense(dense_a.model, data["b_train"], config, data["b_val"], lr=config.lr_phase2,
                              epochs=config.epochs, phase="dense_finetune")
        for name, result in (("dense-phase1", dense_a), ("dense-finetuned", dense_b)):
            _add_row(artifacts, name, "B", result, data["b_val"], baseline)

    anchors = kmeanspp_anchors(data["a_train"].box_sizes(), config.anchors_k, config.seed)
    report.metadata = {
        "version": __version__,
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "baseline_params": baseline,
        "n_train_a": len(data["a_train"]),
        "n_train_b": len(data["b_train"]),
        "n_val": len(data["b_val"]),
        "anchors": " ".join(f"{w:.2f}x{h:.2f}" for w, h in anchors),
    }
    for key in ("a_train", "b_train", "b_val"):
        frame = class_distribution(data[key])
        report.class_counts[key] = {int(c): int(n) for c, n in zip(frame["class_id"], frame["instances"])}

    if out_dir is not None:
        _write_outputs(artifacts, data, Path(out_dir), plots, save_data)
    logger.info("experiment finished with %d report rows", len(report.rows))
    return artifacts


def _write_outputs(artifacts: ExperimentArtifacts, data: Dict[str, SyntheticDataset], out_dir: Path,
                   plots: bool, save_data: bool) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts.report.write(out_dir / "report.txt")
    for name, result in artifacts.histories.items():
        write_history_log(result.history, out_dir / f"history_{name}.log")
    for name, model in artifacts.models.items():
        save_weights(model, out_dir / f"{name}.tfw")
    if save_data:
        for key, dataset in data.items():
            save_dataset(dataset, out_dir / "data" / key)
    if plots:
        for name, evaluation in artifacts.evaluations.items():
            plot_pr_curves(evaluation, out_dir / f"pr_{name}.png", title=f"{name} PR curves (IoU 0.5)")
        plot_history({name: r.history_frame() for name, r in artifacts.histories.items()},
                     out_dir / "history.png")


def seed_sweep(config: TrainConfig, seeds: List[int], **kwargs) -> Dict[int, ExperimentReport]:
    """Run the protocol once per seed (trend checks across seeds)."""
    return {seed: run_experiment(config.with_overrides(seed=seed), **kwargs).report for seed in seeds}


def augmented_beats_frozen(report: ExperimentReport, name: str = "augmented") -> bool:
    return bool(np.greater(report.row(name).map50, report.row("phase1-frozen").map50))
