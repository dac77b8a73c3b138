"""
Training Losses

Evidential Beta NLL, Dice and symmetric Dice over sampled points, mask
classification cross-entropy with a down-weighted no-object class, and the
weighted total.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from app.core.errors import ClassIndexError, DimensionError
from app.models.schemas import LossWeights
from app.services.autodiff import Tensor
from app.services.autodiff.tensor import lift

TensorLike = Union[Tensor, np.ndarray, float]


@dataclass
class MatchedTargets:
    """Matching outcome for one image.

    Attributes:
        pairs: (predicted mask i, ground-truth mask j), sorted by i
        gt_masks: Binary masks [l_X x H*W]
        gt_classes: Class id per ground-truth mask
        sampled_points: Loss point indices per matched pair, in `pairs` order
    """
    pairs: List[Tuple[int, int]]
    gt_masks: np.ndarray
    gt_classes: List[int]
    sampled_points: List[np.ndarray] = field(default_factory=list)


@dataclass
class LossParts:
    """The three scalar loss terms of one image or one batch."""
    ce: Tensor
    sdice: Tensor
    evi: Tensor

    def values(self) -> Dict[str, float]:
        return {"ce": self.ce.item(), "sdice": self.sdice.item(), "evi": self.evi.item()}

    @staticmethod
    def average(parts: Sequence["LossParts"]) -> "LossParts":
        """Mean of each term over a fixed-order sequence."""
        scale = 1.0 / len(parts)
        ce, sdice, evi = parts[0].ce, parts[0].sdice, parts[0].evi
        for p in parts[1:]:
            ce, sdice, evi = ce + p.ce, sdice + p.sdice, evi + p.evi
        return LossParts(ce * scale, sdice * scale, evi * scale)


def beta_nll(alpha: TensorLike, beta: TensorLike, y, eps: float = 1e-3) -> Tensor:
    """Mean negative log Beta density of targets y under Beta(alpha, beta).

    Targets are clamped into [eps, 1 - eps]; with alpha, beta > 1 the density
    vanishes at exactly 0 and 1.

    Returns:
        Scalar tensor; exactly 0 for an empty point set
    """
    y = np.clip(np.asarray(y, dtype=np.float64), eps, 1.0 - eps)
    if y.size == 0:
        return Tensor(0.0)
    alpha, beta = lift(alpha), lift(beta)
    if alpha.shape != y.shape or beta.shape != y.shape:
        raise DimensionError(f"beta_nll: alpha {alpha.shape}, beta {beta.shape}, y {y.shape}")
    log_pdf = (
        (alpha + beta).lgamma() - alpha.lgamma() - beta.lgamma()
        + (alpha - 1.0) * np.log(y) + (beta - 1.0) * np.log1p(-y)
    )
    return -log_pdf.mean()


def dice_loss(p: TensorLike, y, smooth: float = 1.0) -> Tensor:
    """1 - (2 sum(p y) + s) / (sum(p) + sum(y) + s)."""
    p = lift(p)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"dice_loss: p {p.shape} vs y {y.shape}")
    numerator = (p * y).sum() * 2.0 + smooth
    denominator = p.sum() + (float(y.sum()) + smooth)
    return 1.0 - numerator / denominator


def symmetric_dice(alpha: TensorLike, beta: TensorLike, y, smooth: float = 1.0) -> Tensor:
    """Average of the Dice on alpha/(alpha+beta) against y and on beta/(alpha+beta) against 1-y."""
    alpha, beta = lift(alpha), lift(beta)
    y = np.asarray(y, dtype=np.float64)
    total = alpha + beta
    positive = dice_loss(alpha / total, y, smooth)
    negative = dice_loss(beta / total, 1.0 - y, smooth)
    return (positive + negative) * 0.5


def classification_ce(class_logits: Tensor, targets: Sequence[int], no_object_coeff: float) -> Tensor:
    """Mean cross-entropy over all masks; no-object targets weigh `no_object_coeff`.

    Args:
        class_logits: Logits [N_M x (C+1)]; column C is no-object
        targets: One class id per mask, C for unmatched masks
        no_object_coeff: Weight of no-object terms

    Raises:
        ClassIndexError: If a target lies outside [0, C]
    """
    num_masks, width = class_logits.shape
    no_object = width - 1
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (num_masks,):
        raise DimensionError(f"classification_ce: {targets.size} targets for {num_masks} masks")
    bad = (targets < 0) | (targets > no_object)
    if np.any(bad):
        raise ClassIndexError(f"class id {int(targets[bad][0])} outside [0, {no_object}]")

    weights = np.where(targets == no_object, no_object_coeff, 1.0)
    picked = class_logits.log_softmax(axis=1).gather(np.arange(num_masks) * width + targets)
    return -(picked * weights).sum() * (1.0 / num_masks)


def total_loss(parts: LossParts, weights: LossWeights) -> Tensor:
    return (
        parts.ce * weights.lambda_ce
        + parts.sdice * weights.lambda_sdice
        + parts.evi * weights.lambda_evi
    )
