"""
TensorFact - Anchor Estimation

K-Means++ over ground-truth (width, height) pairs.
"""

import logging
from typing import Iterable, Tuple

import numpy as np
from sklearn.cluster import kmeans_plusplus

from .errors import ArgumentError
from .utils import derive_rng

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 100
MOVEMENT_TOLERANCE = 1e-6


def within_cluster_ss(sizes: np.ndarray, centroids: np.ndarray) -> float:
    """Sum of squared distances from each size to its nearest centroid."""
    d2 = ((sizes[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return float(d2.min(axis=1).sum())


def _lloyd(sizes: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, int]:
    for iteration in range(1, MAX_ITERATIONS + 1):
        d2 = ((sizes[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        nearest = d2.argmin(axis=1)
        updated = centroids.copy()
        for c in range(len(centroids)):
            members = sizes[nearest == c]
            if len(members):
                updated[c] = members.mean(axis=0)
        movement = float(np.max(np.linalg.norm(updated - centroids, axis=1)))
        centroids = updated
        if movement < MOVEMENT_TOLERANCE:
            return centroids, iteration
    return centroids, MAX_ITERATIONS


def kmeanspp_anchors(sizes: Iterable[Tuple[float, float]], k: int, seed: int = 0,
                     n_init: int = 10) -> np.ndarray:
    """
    Estimate k anchor sizes.

    Each run seeds with K-Means++ (first centroid uniform, later ones with
    probability proportional to squared distance) and refines with Lloyd
    iterations until no centroid moves by 1e-6 or 100 iterations pass. The
    run with the lowest within-cluster sum of squares wins.

    Args:
        sizes: (w, h) pairs
        k: Number of anchors
        seed: Run seed
        n_init: Number of seeded restarts

    Returns:
        np.ndarray: (k, 2) centroids sorted by area ascending
    """
    data = np.asarray(list(sizes), dtype=np.float64).reshape(-1, 2)
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    if len(data) < k:
        raise ArgumentError(f"need at least {k} boxes, got {len(data)}")
    best, best_score = None, np.inf
    for run in range(max(1, n_init)):
        state = int(derive_rng(seed, run).integers(0, 2**31 - 1))
        initial, _ = kmeans_plusplus(data, n_clusters=k, random_state=state, n_local_trials=1)
        centroids, iterations = _lloyd(data, initial.astype(np.float64))
        score = within_cluster_ss(data, centroids)
        logger.debug("k-means++ run %d converged in %d iterations, wcss=%.6g", run, iterations, score)
        if score < best_score:
            best, best_score = centroids, score
    order = np.lexsort((best[:, 0], best[:, 0] * best[:, 1]))
    return best[order]
