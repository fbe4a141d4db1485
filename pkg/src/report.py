"""
TensorFact - Reports

Layer manifests, exact compression arithmetic and experiment reports.
"""

import logging
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal, localcontext
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import pandas as pd

from .errors import ArgumentError, DataError
from .factorized import FactorizedConvLayer, rank_for_alpha
from .detector import ToyDetector
from .utils import format_float, format_key_values

logger = logging.getLogger(__name__)

FOUR_PLACES = Decimal("0.0001")
TWO_PLACES = Decimal("0.01")


@dataclass
class LayerManifest:
    """Convolution shapes (T, S, D2, D1) plus a count of other parameters."""

    layers: List[Tuple[int, int, int, int]]
    extra: int = 0

    def __post_init__(self):
        for shape in self.layers:
            if len(shape) != 4 or min(shape) < 1:
                raise DataError(f"manifest layer {shape} must have four positive sizes")
        if self.extra < 0:
            raise DataError("extra parameter count must be >= 0")

    def dense_params(self) -> int:
        return sum(t * s * d2 * d1 for t, s, d2, d1 in self.layers) + self.extra

    def factorized_params(self, alpha: float) -> int:
        """Scalars when every listed layer is factored at rank ``rank_for_alpha``."""
        return sum(rank_for_alpha(t, s, d2, d1, alpha) * (t * s + d2 * d1)
                   for t, s, d2, d1 in self.layers) + self.extra

    def delta_params(self, alpha: float) -> int:
        """Augmentation scalars only (trainable in the target-modality phase)."""
        return sum(rank_for_alpha(t, s, d2, d1, alpha) * (t * s + d2 * d1) for t, s, d2, d1 in self.layers)

    def to_text(self) -> str:
        lines = [f"{t} {s} {d2} {d1}" for t, s, d2, d1 in self.layers]
        if self.extra:
            lines.append(f"extra {self.extra}")
        return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> LayerManifest:
    """
    Parse ``T S D2 D1`` lines, optional ``extra <count>`` lines and ``#`` comments.

    Raises:
        DataError: On malformed lines or an empty manifest
    """
    layers, extra = [], 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "extra" and len(parts) == 2:
                extra += int(parts[1])
            elif len(parts) == 4:
                layers.append(tuple(int(p) for p in parts))
            else:
                raise ValueError(f"expected 'T S D2 D1' or 'extra N', got {line!r}")
        except ValueError as e:
            raise DataError(f"manifest line {lineno}: {e}") from e
    if not layers:
        raise DataError("manifest lists no convolution layers")
    return LayerManifest(layers, extra)


def load_manifest(path: Union[str, Path]) -> LayerManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    return parse_manifest(path.read_text(encoding="utf-8"))


def manifest_from_model(model: ToyDetector) -> LayerManifest:
    """Body convolutions as layers; biases and the head as extra."""
    layers = [tuple(layer.kernel_shape) for layer in model.layers]
    extra = sum(layer.bias.size for layer in model.layers) + model.head.param_count()
    return LayerManifest(layers, extra)


def compression_percent(params: int, baseline: int, places: int = 4) -> Decimal:
    """
    (1 - params/baseline)·100 computed exactly, rounded half-up.

    Two-place figures are derived from the four-place figure, as published
    tables do.

    Args:
        params: Parameter count of the model
        baseline: Parameter count of the reference model
        places: 4 or 2

    Returns:
        Decimal: Compression percentage
    """
    if baseline <= 0:
        raise ArgumentError(f"baseline must be positive, got {baseline}")
    if places not in (2, 4):
        raise ArgumentError(f"places must be 2 or 4, got {places}")
    exact = (1 - Fraction(params, baseline)) * 100
    with localcontext() as ctx:
        ctx.prec = 60
        value = (Decimal(exact.numerator) / Decimal(exact.denominator)).quantize(FOUR_PLACES, ROUND_HALF_UP)
        if places == 2:
            value = value.quantize(TWO_PLACES, ROUND_HALF_UP)
    return value


@dataclass
class CompressionRow:
    label: str
    params: int
    baseline: int
    percent: Decimal
    percent_2dp: Decimal

    def as_line(self) -> str:
        return f"{self.label}  params={self.params:,}  baseline={self.baseline:,}  compression={self.percent}%"

    def as_pairs(self) -> Dict[str, str]:
        return {
            "label": self.label,
            "params": str(self.params),
            "baseline": str(self.baseline),
            "compression": str(self.percent),
            "compression_2dp": str(self.percent_2dp),
        }


def compression_report(source: Union[LayerManifest, ToyDetector, int], baseline_param_count: int,
                       alpha: Optional[float] = None, trainable: bool = False,
                       label: Optional[str] = None) -> CompressionRow:
    """
    Compression of a manifest, model or published count against a baseline.

    Args:
        source: Manifest (counted at ``alpha``), model, or a parameter count
        baseline_param_count: Reference parameter count
        alpha: Capacity fraction for manifests (dense count when None)
        trainable: Count only trainable scalars (Δ factors for manifests)
        label: Row label

    Returns:
        CompressionRow: Counts and percentages
    """
    if isinstance(source, LayerManifest):
        if trainable:
            if alpha is None:
                raise ArgumentError("trainable counts of a manifest need alpha")
            params = source.delta_params(alpha)
        else:
            params = source.dense_params() if alpha is None else source.factorized_params(alpha)
    elif isinstance(source, ToyDetector):
        params = source.trainable_total() if trainable else source.param_total()
    else:
        params = int(source)
    if label is None:
        label = f"alpha={alpha}" if alpha is not None else "model"
    return CompressionRow(label, params, baseline_param_count,
                          compression_percent(params, baseline_param_count, 4),
                          compression_percent(params, baseline_param_count, 2))


@dataclass
class ModelResult:
    """One row of an experiment report."""

    name: str
    modality: str
    total_params: int
    trainable_params: int
    compression: Decimal
    map50: float
    map50_95: float
    per_class_ap50: Dict[int, float] = field(default_factory=dict)
    per_class_ap50_95: Dict[int, float] = field(default_factory=dict)


@dataclass
class ExperimentReport:
    rows: List[ModelResult] = field(default_factory=list)
    metadata: Dict[str, str] = field(default_factory=dict)
    class_counts: Dict[str, Dict[int, int]] = field(default_factory=dict)

    def row(self, name: str) -> ModelResult:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_frame(self) -> pd.DataFrame:
        """Table with the columns of the published comparison tables."""
        return pd.DataFrame([
            {
                "model": r.name,
                "eval": r.modality,
                "params": r.total_params,
                "trainable": r.trainable_params,
                "compression_%": str(r.compression),
                "mAP50": format_float(r.map50, 4),
                "mAP50-95": format_float(r.map50_95, 4),
            }
            for r in self.rows
        ])

    def to_text(self) -> str:
        """Human-readable table followed by a machine-readable key = value block."""
        parts = ["TensorFact experiment report", "", self.to_frame().to_string(index=False), ""]
        parts.append(format_key_values(self.metadata, section="run").rstrip("\n"))
        for split, counts in self.class_counts.items():
            parts.append(format_key_values({f"class_{c}": n for c, n in sorted(counts.items())},
                                           section=f"instances.{split}").rstrip("\n"))
        for r in self.rows:
            pairs = {
                "eval": r.modality,
                "params": r.total_params,
                "trainable": r.trainable_params,
                "compression": r.compression,
                "map50": format_float(r.map50),
                "map50_95": format_float(r.map50_95),
            }
            for c in sorted(r.per_class_ap50):
                pairs[f"ap50.class_{c}"] = format_float(r.per_class_ap50[c])
                pairs[f"ap50_95.class_{c}"] = format_float(r.per_class_ap50_95[c])
            parts.append(format_key_values(pairs, section=f"model.{r.name}").rstrip("\n"))
        return "\n\n".join(parts) + "\n"

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        logger.debug("report written to %s", path)
        return path


def model_result(name: str, modality: str, model: ToyDetector, evaluation, baseline: int,
                 trainable: Optional[int] = None) -> ModelResult:
    """Assemble a report row from a model and its ``EvaluationResult``."""
    total = model.param_total()
    return ModelResult(
        name=name,
        modality=modality,
        total_params=total,
        trainable_params=model.trainable_total() if trainable is None else trainable,
        compression=compression_percent(total, baseline, 4),
        map50=evaluation.map50,
        map50_95=evaluation.map50_95,
        per_class_ap50=dict(evaluation.ap50),
        per_class_ap50_95=dict(evaluation.ap50_95),
    )


def factorized_layer_table(model: ToyDetector) -> pd.DataFrame:
    """Per-layer rank and parameter bookkeeping."""
    rows = []
    for i, layer in enumerate(model.layers):
        t, s, d2, d1 = layer.kernel_shape
        if isinstance(layer, FactorizedConvLayer):
            rows.append({"layer": i, "shape": f"{t}x{s}x{d2}x{d1}", "r": layer.r, "delta_r": layer.delta_r,
                         "dense": t * s * d2 * d1, "factored": layer.r * (t * s + d2 * d1),
                         "delta": layer.delta_r * (t * s + d2 * d1)})
        else:
            rows.append({"layer": i, "shape": f"{t}x{s}x{d2}x{d1}", "r": 0, "delta_r": 0,
                         "dense": t * s * d2 * d1, "factored": 0, "delta": 0})
    return pd.DataFrame(rows)
