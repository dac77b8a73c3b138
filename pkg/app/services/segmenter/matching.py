"""
Matching and Point Sampling

Hungarian assignment of predicted masks to ground-truth masks and the
evidential point sampler that picks where mask losses are evaluated.
"""

import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import DimensionError, NumericError
from app.core.rng import Rng
from app.models.schemas import LossWeights
from app.services.segmenter.evidence import EvidenceMaps, class_probabilities


def build_cost(
    evidence: EvidenceMaps,
    class_logits,
    gt_masks: np.ndarray,
    gt_classes: Sequence[int],
    sample: np.ndarray,
    weights: Optional[LossWeights] = None,
    smooth: float = 1.0,
) -> np.ndarray:
    """Matching cost [N_M x l_X] on a shared point sample.

    cost(i, j) = lambda_ce * (-p_i(class_j)) + lambda_sdice * dice(mask_prob_i, Y_j)
    """
    weights = weights or LossWeights()
    sample = np.asarray(sample, dtype=np.int64)
    if sample.size == 0:
        raise DimensionError("build_cost needs a non-empty point sample")

    probs = class_probabilities(class_logits)
    pred = evidence.mask_prob.data[:, sample]
    target = np.asarray(gt_masks, dtype=np.float64)[:, sample]

    cls_cost = -probs[:, np.asarray(gt_classes, dtype=np.int64)]
    intersection = pred @ target.T
    dice = 1.0 - (2.0 * intersection + smooth) / (
        pred.sum(axis=1)[:, None] + target.sum(axis=1)[None, :] + smooth
    )
    return weights.lambda_ce * cls_cost + weights.lambda_sdice * dice


def hungarian(costs) -> List[Tuple[int, int]]:
    """Minimum-cost injective matching covering min(rows, cols) pairs.

    Shortest augmenting paths with row/column potentials. Ties resolve toward
    the lowest column index as rows are added in ascending order.

    Returns:
        (row, col) pairs sorted by row
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2:
        raise DimensionError(f"hungarian expects a matrix, got shape {costs.shape}")
    if not np.all(np.isfinite(costs)):
        raise NumericError("hungarian: cost matrix has non-finite entries")
    rows, cols = costs.shape
    if rows == 0 or cols == 0:
        return []

    transposed = rows > cols
    assignment = _assign(costs.T if transposed else costs)
    if transposed:
        pairs = [(int(c), int(r)) for r, c in enumerate(assignment)]
    else:
        pairs = [(int(r), int(c)) for r, c in enumerate(assignment)]
    return sorted(pairs)


def _assign(a: np.ndarray) -> np.ndarray:
    # rows <= cols; index 0 of u/v/p/way is a virtual sentinel
    n, m = a.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            reduced = a[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    assignment = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            assignment[p[j] - 1] = j - 1
    return assignment


def evidential_sample(
    evi_uncertainty: np.ndarray,
    budget: int,
    rng: Rng,
    importance_ratio: float = 0.75,
) -> np.ndarray:
    """Loss points for one mask: the most uncertain pixels plus a uniform remainder.

    ceil(importance_ratio * budget) pixels with the highest evidential
    uncertainty (ties to the lower index) are taken first; the rest are drawn
    uniformly without replacement from the remaining pixels.

    Returns:
        Sorted unique pixel indices, min(budget, H*W) of them
    """
    if budget < 4:
        raise ValueError(f"point budget must be at least 4, got {budget}")
    scores = np.asarray(evi_uncertainty, dtype=np.float64).reshape(-1)
    num_pixels = scores.size
    if budget >= num_pixels:
        return np.arange(num_pixels)

    top = math.ceil(importance_ratio * budget)
    order = np.argsort(-scores, kind="stable")
    rest = np.sort(order[top:])
    drawn = rng.choice(rest, budget - top)
    return np.sort(np.concatenate([order[:top], drawn]))


def uniform_sample(num_pixels: int, budget: int, rng: Rng) -> np.ndarray:
    """Sorted uniform sample of min(budget, num_pixels) distinct pixels."""
    if budget >= num_pixels:
        return np.arange(num_pixels)
    return np.sort(rng.choice(np.arange(num_pixels), budget))
