"""
Anomaly Instance Clustering

Thresholds an uncertainty map, clusters the embeddings of the uncertain
pixels with DBSCAN under cosine distance, and turns each cluster into an
anomaly instance. Unclustered pixels keep their original class and instance.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from app.models.schemas import ClusterConfig
from app.services.anomaly.inference import Prediction
from app.services.data.catalog import ANOMALY_CLASS

logger = logging.getLogger(__name__)

CONFIDENCE_RULE = "1 + mean(U) over member pixels, clamped to [0, 1]"

NOISE = -1
_UNVISITED = -2
_BLOCK = 512


@dataclass
class AnomalyInstance:
    """One anomaly instance: sorted pixel indices and a confidence in [0, 1]."""
    pixels: np.ndarray
    confidence: float


@dataclass
class AnomalyInstances:
    instances: List[AnomalyInstance] = field(default_factory=list)
    outliers_reassigned: int = 0


def calibrate_threshold(uncertainties: np.ndarray, k_sigma: float) -> float:
    """t = mean(U) + k_sigma * std(U) with the population std."""
    values = np.asarray(uncertainties, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("threshold calibration needs a non-empty sample")
    mean, std = float(values.mean()), float(values.std())
    if std == 0.0:
        logger.warning(f"Calibration sample is constant ({mean:.6f}); threshold equals the mean")
    return mean + k_sigma * std


def select_uncertain(uncertainty: np.ndarray, threshold: float) -> np.ndarray:
    """Ascending indices of pixels with U > t."""
    return np.flatnonzero(np.asarray(uncertainty) > threshold)


def _cosine_neighbors(points: np.ndarray, eps: float) -> List[np.ndarray]:
    norms = np.linalg.norm(points, axis=1)
    valid = norms > 0.0
    unit = np.zeros_like(points)
    unit[valid] = points[valid] / norms[valid, None]
    n = points.shape[0]
    neighbors: List[np.ndarray] = []
    for start in range(0, n, _BLOCK):
        block = 1.0 - unit[start:start + _BLOCK] @ unit.T
        for row, dist in enumerate(block):
            if not valid[start + row]:
                neighbors.append(np.empty(0, dtype=np.int64))
            else:
                neighbors.append(np.flatnonzero((dist <= eps) & valid))
    return neighbors


def dbscan_cosine(points: np.ndarray, cfg: Optional[ClusterConfig] = None) -> np.ndarray:
    """DBSCAN with d(u, v) = 1 - cos(u, v).

    Points are visited in ascending order and clusters expand breadth-first in
    ascending neighbour order. Neighbourhoods include the point itself; a core
    point has at least `min_samples` neighbours within `eps`. A border point
    joins the first cluster that reaches it. Zero vectors are always noise.

    Returns:
        Cluster id per point (0, 1, ...) or -1 for noise
    """
    cfg = cfg or ClusterConfig()
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    labels = np.full(n, _UNVISITED, dtype=np.int64)
    if n == 0:
        return labels

    neighbors = _cosine_neighbors(points, cfg.eps)
    is_core = np.array([nb.size >= cfg.min_samples for nb in neighbors])
    cluster = 0
    for p in range(n):
        if labels[p] != _UNVISITED:
            continue
        if not is_core[p]:
            labels[p] = NOISE
            continue
        labels[p] = cluster
        queue = deque(neighbors[p])
        while queue:
            q = queue.popleft()
            if labels[q] == NOISE:
                labels[q] = cluster
            if labels[q] != _UNVISITED:
                continue
            labels[q] = cluster
            if is_core[q]:
                queue.extend(neighbors[q])
        cluster += 1
    return labels


def finalize_instances(
    labels: np.ndarray,
    selected: np.ndarray,
    prediction: Prediction,
    min_samples: int = 1,
) -> Tuple[AnomalyInstances, Prediction]:
    """Turn clusters into anomaly instances and relabel their pixels.

    Cluster pixels take the anomaly class and fresh instance ids after the
    existing ones; noise pixels keep their predicted class and instance.
    Confidence is 1 + mean(U) over the members, clamped to [0, 1].
    """
    labels = np.asarray(labels, dtype=np.int64)
    selected = np.asarray(selected, dtype=np.int64)
    if labels.shape != selected.shape:
        raise ValueError(f"{labels.size} labels for {selected.size} selected pixels")

    updated = prediction.copy()
    result = AnomalyInstances()
    next_id = int(updated.seg_instance.max(initial=0)) + 1
    clustered = 0
    for cluster in np.unique(labels[labels >= 0]):
        members = np.sort(selected[labels == cluster])
        if members.size < min_samples:
            continue
        confidence = float(np.clip(1.0 + prediction.uncertainty[members].mean(), 0.0, 1.0))
        result.instances.append(AnomalyInstance(pixels=members, confidence=confidence))
        updated.seg_class[members] = ANOMALY_CLASS
        updated.seg_instance[members] = next_id
        updated.instances[next_id] = (-1, ANOMALY_CLASS)
        next_id += 1
        clustered += members.size

    result.outliers_reassigned = int(selected.size - clustered)
    return result, updated


def segment_anomalies(
    prediction: Prediction,
    embeddings: np.ndarray,
    threshold: float,
    cfg: Optional[ClusterConfig] = None,
    scores: Optional[np.ndarray] = None,
) -> Tuple[AnomalyInstances, Prediction]:
    """Threshold, cluster and finalize one image.

    Args:
        prediction: Fused prediction of the image
        embeddings: Pixel embeddings [E x H*W]
        threshold: Score threshold t
        cfg: DBSCAN parameters
        scores: Anomaly score map to threshold (the fused U by default)
    """
    cfg = cfg or ClusterConfig()
    scores = prediction.uncertainty if scores is None else scores
    selected = select_uncertain(scores, threshold)
    labels = dbscan_cosine(embeddings[:, selected].T, cfg)
    instances, updated = finalize_instances(labels, selected, prediction, cfg.min_samples)
    logger.debug(
        f"{selected.size} uncertain pixels -> {len(instances.instances)} anomaly instances, "
        f"{instances.outliers_reassigned} outliers"
    )
    return instances, updated
