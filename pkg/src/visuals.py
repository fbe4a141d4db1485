"""
TensorFact - Visualization Module
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from .dataset import CLASS_NAMES  # noqa: E402

logger = logging.getLogger(__name__)


def plot_pr_curves(evaluation, path: Union[str, Path], title: str = "Precision-Recall (IoU 0.5)") -> Path:
    """
    Save per-class PR curves at IoU 0.5.

    Args:
        evaluation: ``EvaluationResult`` with curves
        path: PNG output path
        title: Figure title

    Returns:
        Path: Written file
    """
    fig, ax = plt.subplots(figsize=(6, 5))
    for class_id, curve in sorted(evaluation.curves.items()):
        name = CLASS_NAMES[class_id] if class_id < len(CLASS_NAMES) else str(class_id)
        if curve:
            recall, precision = zip(*curve)
        else:
            recall, precision = [0.0], [0.0]
        ax.step(recall, precision, where="post",
                label=f"{name} (AP50={evaluation.ap50[class_id]:.3f})")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_title(title)
    ax.legend(loc="lower left")
    return _save(fig, path)


def plot_history(histories: Dict[str, pd.DataFrame], path: Union[str, Path],
                 column: str = "L_d", title: Optional[str] = None) -> Path:
    """
    Save training/validation curves of one loss column for several runs.

    Args:
        histories: Run name -> frame from ``history_frame``
        path: PNG output path
        column: Loss column to plot
        title: Figure title

    Returns:
        Path: Written file
    """
    fig, ax = plt.subplots(figsize=(8, 5))
    for name, frame in histories.items():
        for split, style in (("train", "-"), ("val", "--")):
            part = frame[frame["split"] == split]
            if not part.empty:
                ax.plot(part["epoch"], part[column], style, label=f"{name} {split}")
    ax.set_xlabel("Epoch")
    ax.set_ylabel(column)
    ax.set_title(title or f"{column} per epoch")
    ax.grid(True, alpha=0.3)
    ax.legend()
    return _save(fig, path)


def _save(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", dpi=100, bbox_inches="tight")
    plt.close(fig)
    logger.debug("figure written to %s", path)
    return path
