"""
Set Criterion

Loss of one image: match predicted masks to ground-truth masks, sample loss
points per matched mask and evaluate the classification, Dice and evidential
terms.
"""

import logging
from typing import List, Sequence, Tuple

import numpy as np

from app.core.config import RunConfig
from app.core.rng import Rng
from app.services.autodiff import Tensor
from app.services.segmenter.evidence import EvidenceMaps, MaskQueries
from app.services.segmenter.losses import (
    LossParts,
    MatchedTargets,
    beta_nll,
    classification_ce,
    dice_loss,
    symmetric_dice,
)
from app.services.segmenter.matching import build_cost, evidential_sample, hungarian, uniform_sample

logger = logging.getLogger(__name__)


def match_masks(
    evidence: EvidenceMaps,
    queries: MaskQueries,
    gt_masks: np.ndarray,
    gt_classes: Sequence[int],
    cfg: RunConfig,
    rng: Rng,
) -> List[Tuple[int, int]]:
    """Hungarian matching on a uniform point sample shared by all masks."""
    if len(gt_classes) == 0:
        return []
    num_pixels = gt_masks.shape[1]
    sample = uniform_sample(num_pixels, cfg.points_per_mask, rng.spawn("match"))
    costs = build_cost(
        evidence, queries.class_logits, gt_masks, gt_classes, sample,
        weights=cfg.loss_weights(), smooth=cfg.dice_smooth,
    )
    return hungarian(costs)


def compute_image_loss(
    evidence: EvidenceMaps,
    queries: MaskQueries,
    gt_masks: np.ndarray,
    gt_classes: Sequence[int],
    cfg: RunConfig,
    rng: Rng,
) -> Tuple[LossParts, MatchedTargets]:
    """All three loss terms for one image.

    Mask terms average over matched masks (each over its own sampled points);
    classification averages over every mask, unmatched ones targeting
    no-object.

    Args:
        evidence: Evidence maps of the image
        queries: Mask queries of the image
        gt_masks: Binary ground-truth masks [l_X x H*W]
        gt_classes: Class id per ground-truth mask
        cfg: Run configuration (budget, ablation switches, constants)
        rng: Stream for matching and point sampling

    Returns:
        The loss parts and the matching record
    """
    gt_masks = np.asarray(gt_masks, dtype=bool)
    num_masks = queries.num_masks
    num_pixels = evidence.alpha.shape[1]
    pairs = match_masks(evidence, queries, gt_masks, gt_classes, cfg, rng)

    targets = [queries.num_classes] * num_masks
    evi_terms, dice_terms, points_used = [], [], []
    uncertainty = evidence.evi_uncertainty.data
    for i, j in pairs:
        targets[i] = int(gt_classes[j])
        stream = rng.spawn("points", i)
        if cfg.evidential_sampling:
            points = evidential_sample(uncertainty[i], cfg.points_per_mask, stream, cfg.importance_ratio)
        else:
            points = uniform_sample(num_pixels, cfg.points_per_mask, stream)
        points_used.append(points)

        flat = i * num_pixels + points
        alpha = evidence.alpha.gather(flat)
        beta = evidence.beta.gather(flat)
        y = gt_masks[j, points].astype(np.float64)
        evi_terms.append(beta_nll(alpha, beta, y, eps=cfg.target_eps))
        if cfg.symmetric_dice:
            dice_terms.append(symmetric_dice(alpha, beta, y, smooth=cfg.dice_smooth))
        else:
            dice_terms.append(dice_loss(alpha / (alpha + beta), y, smooth=cfg.dice_smooth))

    ce = classification_ce(queries.class_logits, targets, cfg.no_object_coeff)
    parts = LossParts(ce=ce, sdice=_mean(dice_terms), evi=_mean(evi_terms))
    matched = MatchedTargets(
        pairs=pairs, gt_masks=gt_masks, gt_classes=list(gt_classes), sampled_points=points_used
    )
    return parts, matched


def _mean(terms: List[Tensor]) -> Tensor:
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))
