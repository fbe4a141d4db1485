"""
TensorFact - Detection Metrics

IoU, greedy confidence-ordered matching, precision/recall curves,
all-point interpolated AP and mAP over IoU thresholds.
"""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .config import MAP50_95_THRESHOLDS, MAP50_THRESHOLDS
from .errors import ArgumentError, DataError
from .utils import format_float

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ArgumentError(f"invalid box {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class Detection:
    image_id: int
    class_id: int
    box: Box
    confidence: float

    def __post_init__(self):
        if not (math.isfinite(self.confidence) and 0.0 <= self.confidence <= 1.0):
            raise ArgumentError(f"confidence must be finite in [0, 1], got {self.confidence}")


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: int
    class_id: int
    box: Box


@dataclass
class MatchResult:
    """Outcome of matching one class at one IoU threshold."""

    labels: List[bool]
    confidences: List[float]
    false_negatives: int
    total_gt: int

    @property
    def true_positives(self) -> int:
        return sum(self.labels)

    @property
    def false_positives(self) -> int:
        return len(self.labels) - self.true_positives


@dataclass
class EvaluationResult:
    """Per-class and mean AP of a detection set."""

    classes: List[int]
    ap50: Dict[int, float] = field(default_factory=dict)
    ap50_95: Dict[int, float] = field(default_factory=dict)
    curves: Dict[int, List[Tuple[float, float]]] = field(default_factory=dict)
    gt_counts: Dict[int, int] = field(default_factory=dict)

    @property
    def map50(self) -> float:
        return float(np.mean([self.ap50[c] for c in self.classes]))

    @property
    def map50_95(self) -> float:
        return float(np.mean([self.ap50_95[c] for c in self.classes]))


def iou(a: Box, b: Box) -> float:
    """
    Intersection over union of two boxes.

    Args:
        a: First box
        b: Second box

    Returns:
        float: IoU in [0, 1]; 0 when the union is empty
    """
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def _sorted_by_confidence(dets: Sequence[Detection]) -> List[Detection]:
    # sorted() is stable, so equal confidences keep input order
    return sorted(dets, key=lambda d: -d.confidence)


def _prepare(dets: Sequence[Detection], gts: Sequence[GroundTruthBox]):
    ordered = _sorted_by_confidence(dets)
    gt_by_image: Dict[int, List[GroundTruthBox]] = defaultdict(list)
    for gt in gts:
        gt_by_image[gt.image_id].append(gt)
    overlaps = [[iou(det.box, gt.box) for gt in gt_by_image.get(det.image_id, [])] for det in ordered]
    return ordered, gt_by_image, overlaps


def _match_prepared(ordered, gt_by_image, overlaps, total_gt: int, iou_threshold: float) -> MatchResult:
    matched = {image_id: [False] * len(boxes) for image_id, boxes in gt_by_image.items()}
    labels = []
    for det, ious in zip(ordered, overlaps):
        taken = matched.get(det.image_id, [])
        best, best_iou = -1, -1.0
        for j, value in enumerate(ious):
            if not taken[j] and value >= iou_threshold and value > best_iou:
                best, best_iou = j, value
        if best >= 0:
            taken[best] = True
        labels.append(best >= 0)
    false_negatives = sum(not flag for flags in matched.values() for flag in flags)
    return MatchResult(labels, [d.confidence for d in ordered], false_negatives, total_gt)


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], iou_threshold: float,
                     class_id: Optional[int] = None) -> MatchResult:
    """
    Label detections as true or false positives.

    Detections are visited in descending confidence; each takes the unmatched
    ground truth of its image with the highest IoU at or above the threshold.

    Args:
        dets: Detections of one class
        gts: Ground truths of the same class
        iou_threshold: Minimum IoU for a true positive
        class_id: If given, both lists are filtered to this class first

    Returns:
        MatchResult: TP/FP labels in visiting order and the FN count
    """
    if class_id is not None:
        dets = [d for d in dets if d.class_id == class_id]
        gts = [g for g in gts if g.class_id == class_id]
    ordered, gt_by_image, overlaps = _prepare(dets, gts)
    return _match_prepared(ordered, gt_by_image, overlaps, len(gts), iou_threshold)


def pr_curve(labels: Sequence[bool], total_gt: int) -> List[Tuple[float, float]]:
    """
    Cumulative (recall, precision) points over confidence-sorted labels.

    Args:
        labels: True-positive flags in confidence order
        total_gt: Number of ground truths of the class

    Returns:
        list: (recall, precision) per detection; empty when there is no ground truth
    """
    if total_gt <= 0:
        return []
    tp = np.cumsum(np.asarray(labels, dtype=np.int64))
    fp = np.cumsum(1 - np.asarray(labels, dtype=np.int64))
    return [(int(t) / total_gt, int(t) / int(t + f)) for t, f in zip(tp, fp)]


def average_precision(pr: Sequence[Tuple[float, float]]) -> float:
    """
    Area under the precision envelope (all-point interpolation).

    Args:
        pr: Curve from ``pr_curve``

    Returns:
        float: AP in [0, 1]
    """
    if not pr:
        return 0.0
    recall = [0.0] + [r for r, _ in pr] + [1.0]
    precision = [0.0] + [p for _, p in pr] + [0.0]
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    ap = 0.0
    for i in range(len(recall) - 1):
        if recall[i + 1] != recall[i]:
            ap += (recall[i + 1] - recall[i]) * precision[i + 1]
    return ap


def _classes_with_gt(gts: Sequence[GroundTruthBox]) -> List[int]:
    return sorted({g.class_id for g in gts})


def _class_ap(dets, gts, class_id, thresholds) -> Tuple[List[float], List[Tuple[float, float]]]:
    class_dets = [d for d in dets if d.class_id == class_id]
    class_gts = [g for g in gts if g.class_id == class_id]
    prepared = _prepare(class_dets, class_gts)
    aps, first_curve = [], []
    for i, threshold in enumerate(thresholds):
        result = _match_prepared(*prepared, len(class_gts), threshold)
        curve = pr_curve(result.labels, result.total_gt)
        if i == 0:
            first_curve = curve
        aps.append(average_precision(curve))
    return aps, first_curve


def mean_ap(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
            thresholds: Sequence[float] = MAP50_THRESHOLDS) -> float:
    """
    Mean over classes with ground truth of AP, then mean over thresholds.

    Args:
        dets: All detections
        gts: All ground truths
        thresholds: IoU thresholds (``(0.5,)`` for mAP 50)

    Returns:
        float: mAP
    """
    if len(thresholds) == 0:
        raise ArgumentError("at least one IoU threshold is required")
    classes = _classes_with_gt(gts)
    if not classes:
        raise ArgumentError("mAP is undefined without ground truth")
    per_class = np.array([_class_ap(dets, gts, c, thresholds)[0] for c in classes])
    return float(np.mean(per_class.mean(axis=0)))


def evaluate_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                        classes: Optional[Iterable[int]] = None) -> EvaluationResult:
    """
    AP 50 and AP 50-95 per class plus the mean values.

    Args:
        dets: All detections
        gts: All ground truths
        classes: Class ids to consider (default: every class with ground truth)

    Returns:
        EvaluationResult: Per-class metrics; classes without ground truth are excluded
    """
    wanted = _classes_with_gt(gts) if classes is None else sorted(set(classes))
    counts = defaultdict(int)
    for g in gts:
        counts[g.class_id] += 1
    present = [c for c in wanted if counts[c] > 0]
    if not present:
        raise ArgumentError("mAP is undefined without ground truth")
    result = EvaluationResult(classes=present)
    for c in present:
        aps, curve = _class_ap(dets, gts, c, MAP50_95_THRESHOLDS)
        result.ap50[c] = aps[0]
        result.ap50_95[c] = float(np.mean(aps))
        result.curves[c] = curve
        result.gt_counts[c] = counts[c]
    logger.debug("evaluated %d detections against %d ground truths", len(dets), len(gts))
    return result


def write_detection_lines(items: Iterable) -> str:
    """
    Render detections or ground truths as interchange lines.

    ``image_id class_id x_min y_min x_max y_max [confidence]``, the confidence
    column only for detections.
    """
    lines = []
    for item in items:
        fields_ = [str(item.image_id), str(item.class_id)] + [format_float(v) for v in item.box.as_tuple()]
        if isinstance(item, Detection):
            fields_.append(format_float(item.confidence))
        lines.append(" ".join(fields_))
    return "\n".join(lines) + ("\n" if lines else "")


def read_detection_lines(text: str, with_confidence: bool) -> List:
    """
    Parse interchange lines.

    Args:
        text: File contents
        with_confidence: True for detections, False for ground truth

    Returns:
        list: Detection or GroundTruthBox objects
    """
    expected = 7 if with_confidence else 6
    items = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != expected:
            raise DataError(f"line {lineno}: expected {expected} fields, got {len(parts)}")
        try:
            image_id, class_id = int(parts[0]), int(parts[1])
            box = Box(*(float(v) for v in parts[2:6]))
            if with_confidence:
                items.append(Detection(image_id, class_id, box, float(parts[6])))
            else:
                items.append(GroundTruthBox(image_id, class_id, box))
        except ValueError as e:
            raise DataError(f"line {lineno}: {e}") from e
    return items
