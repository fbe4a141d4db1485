"""
TensorFact - Training

Two-phase protocol (source modality, then augmented fine-tuning on the
scarce target modality), gradient accumulation and finite-difference
gradient verification.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Hashable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .config import TrainConfig
from .detector import COMPACT_ARCH, ParamKey, ToyDetector, augment_model, build_toy_detector, encode_targets
from .errors import ArgumentError, NumericError, StateError
from .losses import DetectionTargets, LossBreakdown
from .optim import AdamState, PlateauScheduler, adam_step
from .utils import derive_rng, format_float

logger = logging.getLogger(__name__)

PHASE_KEYS = {"phase1": 1, "phase2": 2, "dense": 3, "dense_finetune": 4}
HISTORY_COLUMNS = ["epoch", "split", "L_d", "L_c", "L_f", "lr"]


@dataclass
class HistoryRow:
    epoch: int
    split: str
    l_d: float
    l_c: float
    l_f: float
    lr: float

    def as_line(self) -> str:
        return " ".join([str(self.epoch), self.split, format_float(self.l_d), format_float(self.l_c),
                         format_float(self.l_f), f"{self.lr:.6g}"])


@dataclass
class TrainResult:
    """Best-validation checkpoint and the trajectory that produced it."""

    model: ToyDetector
    phase: str
    history: List[HistoryRow] = field(default_factory=list)
    step_losses: List[LossBreakdown] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf

    def history_frame(self) -> pd.DataFrame:
        return history_frame(self.history)


def history_frame(rows: Sequence[HistoryRow]) -> pd.DataFrame:
    """Training history as a DataFrame with the log-file column names."""
    return pd.DataFrame(
        [(r.epoch, r.split, r.l_d, r.l_c, r.l_f, r.lr) for r in rows],
        columns=HISTORY_COLUMNS,
    )


def write_history_log(rows: Sequence[HistoryRow], path: Union[str, Path]) -> Path:
    """
    Write history as ``epoch split L_d L_c L_f lr`` lines.

    Args:
        rows: History rows
        path: Output file

    Returns:
        Path: The written file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# " + " ".join(HISTORY_COLUMNS)] + [row.as_line() for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@dataclass
class TrainingData:
    """Network-ready inputs and encoded targets of a dataset split."""

    inputs: np.ndarray
    targets: DetectionTargets

    def __len__(self) -> int:
        return len(self.inputs)


def prepare_data(model: ToyDetector, dataset) -> TrainingData:
    """
    Scale images to [0, 1] and encode targets for the model's grid.

    Args:
        model: Detector defining dtype, grid and classes
        dataset: Object with ``inputs(dtype)`` and ``annotations``

    Returns:
        TrainingData: Arrays ready for training
    """
    if isinstance(dataset, TrainingData):
        return dataset
    inputs = dataset.inputs(model.dtype)
    if len(inputs) == 0:
        raise ArgumentError("cannot train on an empty dataset")
    grid = model.grid_size(inputs.shape[2])
    return TrainingData(inputs, encode_targets(dataset.annotations, grid, model.classes, model.dtype))


def evaluate_loss(model: ToyDetector, data: TrainingData, omega_c: float = 0.0, p: Optional[int] = None,
                  lc_all_layers: bool = True, batch_size: int = 16) -> LossBreakdown:
    """Sample-weighted loss over a whole split, without gradients."""
    totals = np.zeros(3)
    for start in range(0, len(data), batch_size):
        index = np.arange(start, min(start + batch_size, len(data)))
        b = model.loss(data.inputs[index], data.targets.subset(index), omega_c, p, lc_all_layers)
        totals += len(index) * np.array([b.l_d, b.l_c, b.l_f])
    l_d, l_c, l_f = totals / len(data)
    return LossBreakdown(float(l_d), float(l_c), float(l_f), len(data))


def _accumulate(model: ToyDetector, data: TrainingData, group: Sequence[np.ndarray], omega_c: float,
                p: Optional[int], lc_all_layers: bool) -> Tuple[LossBreakdown, Dict[ParamKey, np.ndarray]]:
    total = sum(len(batch) for batch in group)
    acc: Dict[ParamKey, np.ndarray] = {}
    values = np.zeros(3)
    for batch in group:
        weight = len(batch) / total
        breakdown, grads = model.loss_and_grads(data.inputs[batch], data.targets.subset(batch),
                                                omega_c, p, lc_all_layers)
        if not math.isfinite(breakdown.l_f):
            raise NumericError(f"loss diverged: {breakdown}")
        values += weight * np.array([breakdown.l_d, breakdown.l_c, breakdown.l_f])
        for key, g in grads.items():
            scaled = (weight * g).astype(g.dtype)
            if key in acc:
                acc[key] += scaled
            else:
                acc[key] = scaled
    return LossBreakdown(float(values[0]), float(values[1]), float(values[2]), total), acc


def _fit(model: ToyDetector, train: TrainingData, val: TrainingData, config: TrainConfig, *,
         lr: float, epochs: int, phase: str, omega_c: float = 0.0, p: Optional[int] = None) -> TrainResult:
    params = model.parameters()
    trainable = model.trainable_keys()
    state = AdamState(lr=lr)
    scheduler = PlateauScheduler(lr, patience=config.patience, factor=config.sched_factor)
    result = TrainResult(model=model.copy(), phase=phase)
    n = len(train)
    for epoch in range(1, epochs + 1):
        rng = derive_rng(config.seed, PHASE_KEYS[phase], epoch)
        order = rng.permutation(n)
        batches = [order[i: i + config.batch_size] for i in range(0, n, config.batch_size)]
        totals = np.zeros(3)
        for start in range(0, len(batches), config.accum_steps):
            group = batches[start: start + config.accum_steps]
            breakdown, grads = _accumulate(model, train, group, omega_c, p, config.lc_all_layers)
            adam_step(params, grads, state, trainable)
            result.step_losses.append(breakdown)
            totals += breakdown.n_samples * np.array([breakdown.l_d, breakdown.l_c, breakdown.l_f])
        epoch_lr = state.lr
        l_d, l_c, l_f = totals / n
        result.history.append(HistoryRow(epoch, "train", float(l_d), float(l_c), float(l_f), epoch_lr))
        val_loss = evaluate_loss(model, val, omega_c, p, config.lc_all_layers, config.batch_size)
        result.history.append(HistoryRow(epoch, "val", val_loss.l_d, val_loss.l_c, val_loss.l_f, epoch_lr))
        logger.info("%s epoch %d: train L_f=%.6f val L_d=%.6f lr=%.3g", phase, epoch, l_f, val_loss.l_d, epoch_lr)
        # the scheduler and the checkpoint follow the detection loss only
        if val_loss.l_d < result.best_val_loss:
            result.best_val_loss = val_loss.l_d
            result.best_epoch = epoch
            result.model = model.copy()
        state.lr = scheduler.step(val_loss.l_d)
    return result


def train_phase1(model: ToyDetector, dataset, config: TrainConfig, val_dataset=None) -> TrainResult:
    """
    Train every parameter on the abundant source modality.

    Args:
        model: Factorized detector without augmentation
        dataset: Training split
        config: Experiment configuration (lr_phase1, epochs_phase1...)
        val_dataset: Validation split driving the scheduler (the training split when None)

    Returns:
        TrainResult: Best-validation checkpoint and history
    """
    if any(layer.delta_r for layer in model.factorized_layers):
        raise StateError("phase-1 training expects a model without augmentation")
    if any(layer.base_frozen for layer in model.factorized_layers) or model.head.frozen:
        raise StateError("phase-1 training expects every parameter to be trainable")
    working = model.copy()
    train = prepare_data(working, dataset)
    val = prepare_data(working, val_dataset) if val_dataset is not None else train
    return _fit(working, train, val, config, lr=config.lr_phase1, epochs=config.epochs_phase1, phase="phase1")


def train_phase2(model: ToyDetector, dataset, config: TrainConfig, val_dataset=None) -> TrainResult:
    """
    Fine-tune the augmentation branches on the target modality.

    The base factors and body biases stay frozen; the head trains only when
    ``config.train_head_phase2`` is set. With ``config.p_norm`` the
    complementarity term enters the objective with weight ``omega_c``.

    Args:
        model: Augmented detector (see ``augment_model``)
        dataset: Scarce target-modality training split
        config: Experiment configuration
        val_dataset: Validation split

    Returns:
        TrainResult: Best-validation checkpoint and history
    """
    if not model.is_augmented or not all(layer.base_frozen for layer in model.factorized_layers):
        raise StateError("phase-2 training needs an augmented model with a frozen base")
    working = model.copy()
    working.head.frozen = not config.train_head_phase2
    train = prepare_data(working, dataset)
    val = prepare_data(working, val_dataset) if val_dataset is not None else train
    return _fit(working, train, val, config, lr=config.lr_phase2, epochs=config.epochs, phase="phase2",
                omega_c=config.omega_c, p=config.p_norm)


def train_dense(model: ToyDetector, dataset, config: TrainConfig, val_dataset=None,
                lr: Optional[float] = None, epochs: Optional[int] = None, phase: str = "dense") -> TrainResult:
    """Train every parameter of an unfactorized model (baseline rows)."""
    if model.factorized_layers:
        raise StateError("dense training expects an unfactorized model")
    working = model.copy()
    train = prepare_data(working, dataset)
    val = prepare_data(working, val_dataset) if val_dataset is not None else train
    return _fit(working, train, val, config, lr=config.lr_phase1 if lr is None else lr,
                epochs=config.epochs_phase1 if epochs is None else epochs, phase=phase)


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_key: Optional[Hashable] = None
    worst_index: int = -1
    analytic: float = 0.0
    numeric: float = 0.0
    n_checked: int = 0
    refinements: int = 0


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def _central_difference(objective: Callable[[], float], param: np.ndarray, j: int, epsilon: float,
                        signature: Optional[Callable[[], bytes]], max_refinements: int) -> Tuple[float, int]:
    original = param.flat[j]
    reference = signature() if signature else None

    def evaluate(delta):
        param.flat[j] = original + delta
        value = objective()
        return value, (signature() if signature else None)

    step = epsilon
    refinements = 0
    while True:
        f_plus, s_plus = evaluate(step)
        f_minus, s_minus = evaluate(-step)
        smooth = signature is None or (s_plus == reference and s_minus == reference)
        if smooth or refinements == max_refinements:
            break
        step /= 4.0
        refinements += 1
    f_half_plus, _ = evaluate(step / 2)
    f_half_minus, _ = evaluate(-step / 2)
    param.flat[j] = original
    coarse = (f_plus - f_minus) / (2 * step)
    fine = (f_half_plus - f_half_minus) / step
    return (4.0 * fine - coarse) / 3.0, refinements


def check_gradients(objective: Callable[[], float], params: Dict[Hashable, np.ndarray],
                    analytic: Dict[Hashable, np.ndarray], epsilon: float = 1e-3,
                    signature: Optional[Callable[[], bytes]] = None,
                    entries: Optional[Dict[Hashable, Sequence[int]]] = None,
                    max_refinements: int = 6) -> GradCheckResult:
    """
    Compare analytic gradients with Richardson-extrapolated central differences.

    ``objective`` must read the arrays in ``params`` (which are perturbed in
    place and restored). When ``signature`` reports a different non-smooth
    pattern at θ±ε than at θ, the step is divided by 4, at most
    ``max_refinements`` times.

    Args:
        objective: Loss of the current parameter values
        params: Parameter arrays
        analytic: Gradients with the same keys
        epsilon: Initial step
        signature: Optional callable returning the current ReLU kink pattern
        entries: Optional flat indices to check per key (all when None)
        max_refinements: Step reductions allowed per entry

    Returns:
        GradCheckResult: Worst relative error and where it occurred
    """
    result = GradCheckResult(max_rel_error=0.0)
    for key, param in params.items():
        grad = analytic[key].reshape(-1)
        indices = range(param.size) if entries is None else entries[key]
        for j in indices:
            numeric, refinements = _central_difference(objective, param, j, epsilon, signature, max_refinements)
            result.refinements += refinements
            result.n_checked += 1
            error = relative_error(float(grad[j]), numeric)
            if error > result.max_rel_error or result.worst_key is None:
                result.max_rel_error = error
                result.worst_key, result.worst_index = key, int(j)
                result.analytic, result.numeric = float(grad[j]), numeric
    if result.refinements:
        logger.debug("gradient check refined the step %d times near kinks", result.refinements)
    return result


def finite_diff_check(model: ToyDetector, sample: Tuple[np.ndarray, DetectionTargets], epsilon: float = 1e-3,
                      omega_c: float = 0.0, p: Optional[int] = None, lc_all_layers: bool = True,
                      max_entries_per_param: Optional[int] = None, seed: int = 0,
                      grad_transform: Optional[Callable[[Dict], Dict]] = None) -> GradCheckResult:
    """
    Verify every analytic gradient of the full objective in 64-bit mode.

    Args:
        model: Detector (a float64 copy is checked)
        sample: (images, targets)
        epsilon: Finite-difference step
        omega_c: Complementarity weight
        p: Norm order of the complementarity term, or None
        lc_all_layers: Apply the term at every augmented layer
        max_entries_per_param: Check a seeded subset of entries per parameter
        seed: Seed of the subset
        grad_transform: Hook applied to the analytic gradients before comparison

    Returns:
        GradCheckResult: Worst relative error
    """
    working = model.astype(np.float64)
    x, targets = sample
    x = x.astype(np.float64)
    _, analytic = working.loss_and_grads(x, targets, omega_c, p, lc_all_layers)
    if grad_transform is not None:
        analytic = grad_transform(analytic)
    params = working.parameters()
    entries = None
    if max_entries_per_param is not None:
        rng = np.random.default_rng(seed)
        entries = {
            key: np.sort(rng.choice(value.size, size=min(value.size, max_entries_per_param), replace=False))
            for key, value in params.items()
        }

    def objective() -> float:
        return working.loss(x, targets, omega_c, p, lc_all_layers).l_f

    def signature() -> bytes:
        return working.kink_signature(x, p, omega_c, lc_all_layers)

    return check_gradients(objective, params, analytic, epsilon, signature, entries)


def make_gradcheck_case(seed: int, classes: int = 3, canvas: int = 16,
                        n_images: int = 2) -> Tuple[ToyDetector, Tuple[np.ndarray, DetectionTargets]]:
    """
    Small augmented float64 detector with a random sample.

    The augmentation factors ΔB are drawn nonzero so every gradient path is
    live.

    Returns:
        tuple: (model, (images, targets))
    """
    config = TrainConfig(alpha=0.5, classes=classes, canvas=canvas, seed=seed)
    model = build_toy_detector(config, arch=COMPACT_ARCH, dtype=np.float64)
    model = augment_model(model, delta_ratio=0.5, seed=seed)
    rng = derive_rng(seed, 300)
    for layer in model.factorized_layers:
        layer.delta_B = rng.normal(0.0, 0.3, size=layer.delta_B.shape)
        layer.bias = rng.normal(0.0, 0.1, size=layer.bias.shape)
    x = rng.uniform(0.0, 1.0, size=(n_images, 1, canvas, canvas))
    annotations = []
    for _ in range(n_images):
        count = int(rng.integers(1, 3))
        annotations.append([
            (int(rng.integers(0, classes)), *rng.uniform(0.1, 0.9, size=2), *rng.uniform(0.2, 0.6, size=2))
            for _ in range(count)
        ])
    targets = encode_targets(annotations, model.grid_size(canvas), classes, np.float64)
    return model, (x, targets)
