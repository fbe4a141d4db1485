"""
TensorFact - Optimizer and Learning-Rate Schedule
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Hashable, Iterable, Optional

import numpy as np

from .config import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, PLATEAU_THRESHOLD

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First/second moments per parameter key and the shared step counter."""

    lr: float
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    t: int = 0
    m: Dict[Hashable, np.ndarray] = field(default_factory=dict)
    v: Dict[Hashable, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[Hashable, np.ndarray], grads: Dict[Hashable, np.ndarray],
              state: AdamState, trainable: Optional[Iterable[Hashable]] = None) -> AdamState:
    """
    Apply one bias-corrected ADAM update in place.

    Parameters outside ``trainable`` are skipped entirely: their moments are
    not touched, so frozen values stay bit-identical.

    Args:
        params: Parameter arrays keyed by name (updated in place)
        grads: Gradients with the same keys
        state: Optimizer state (updated in place)
        trainable: Keys allowed to change; all keys when None

    Returns:
        AdamState: The updated state
    """
    state.t += 1
    allowed = set(params) if trainable is None else set(trainable)
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for key, param in params.items():
        if key not in allowed or key not in grads:
            continue
        g = grads[key]
        if g.shape != param.shape:
            raise ValueError(f"gradient {key} has shape {g.shape}, parameter has {param.shape}")
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(param)
            state.v[key] = np.zeros_like(param)
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        m_hat = m / correction1
        v_hat = v / correction2
        param -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype)
    return state


@dataclass
class PlateauScheduler:
    """Reduce-on-plateau learning-rate schedule driven by validation loss."""

    lr: float
    patience: int = 10
    factor: float = 0.1
    threshold: float = PLATEAU_THRESHOLD
    best: float = math.inf
    num_bad_epochs: int = 0
    reductions: int = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.num_bad_epochs = 0
        else:
            self.num_bad_epochs += 1
        if self.num_bad_epochs >= self.patience:
            self.lr *= self.factor
            self.num_bad_epochs = 0
            self.reductions += 1
            logger.info("validation loss stalled for %d epochs; lr reduced to %.3g", self.patience, self.lr)
        return self.lr


def plateau_step(sched: PlateauScheduler, val_loss: float) -> float:
    return sched.step(val_loss)
