"""
Inference and Uncertainty Fusion

Runs the segmenter without recording, rejects no-object and low-confidence
masks, and fuses the survivors into a panoptic prediction with a per-pixel
uncertainty U = -p_C * p_M taken from the mask with the most positive
evidence at each pixel.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, Optional, Tuple, Union

import numpy as np

from app.models.schemas import FilterConfig
from app.services.autodiff import Tensor, no_grad
from app.services.data.catalog import THING_CLASSES
from app.services.segmenter.evidence import class_probabilities, compute_evidence, mask_logits
from app.services.segmenter.model import ModelParams, forward

logger = logging.getLogger(__name__)

ArrayOrTensor = Union[Tensor, np.ndarray]


def _array(x: ArrayOrTensor) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


@dataclass
class ModelOutputs:
    """Plain-array model outputs for one image.

    Attributes:
        alpha: [N_M x H*W]
        beta: [N_M x H*W]
        mask_prob: [N_M x H*W]
        class_logits: [N_M x (C+1)]
        embeddings: Pixel embeddings F_E [E x H*W]
    """
    alpha: np.ndarray
    beta: np.ndarray
    mask_prob: np.ndarray
    class_logits: np.ndarray
    embeddings: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.class_logits.shape[1] - 1

    def logits(self) -> np.ndarray:
        """Per-pixel class logits [C x H*W] from mask probabilities and class softmax."""
        return mask_logits(self.mask_prob, self.class_logits)


@dataclass
class Prediction:
    """Fused panoptic prediction of one image.

    Attributes:
        seg_class: Class id per pixel
        seg_instance: Instance id per pixel, 0 for none
        uncertainty: U per pixel in [-1, 0]
        mask_classes: Winning real class per mask
        mask_confidence: Winning real-class probability per mask
        filtered: Indices of rejected masks
        fallback: True when every mask was rejected and all were used instead
        winner: Index of the mask i* chosen at each pixel
        low_confidence: Pixels where p_M < 0.5 at i*
        instances: Instance id -> (mask index, class id)
    """
    seg_class: np.ndarray
    seg_instance: np.ndarray
    uncertainty: np.ndarray
    mask_classes: np.ndarray
    mask_confidence: np.ndarray
    filtered: FrozenSet[int]
    fallback: bool
    winner: np.ndarray
    low_confidence: np.ndarray
    instances: Dict[int, Tuple[int, int]] = field(default_factory=dict)

    def copy(self) -> "Prediction":
        return Prediction(
            seg_class=self.seg_class.copy(),
            seg_instance=self.seg_instance.copy(),
            uncertainty=self.uncertainty.copy(),
            mask_classes=self.mask_classes.copy(),
            mask_confidence=self.mask_confidence.copy(),
            filtered=self.filtered,
            fallback=self.fallback,
            winner=self.winner.copy(),
            low_confidence=self.low_confidence.copy(),
            instances=dict(self.instances),
        )


def run_model(params: ModelParams, image: np.ndarray) -> ModelOutputs:
    """Forward pass without recording; returns plain arrays."""
    with no_grad():
        pixels, queries = forward(params, image)
        evidence = compute_evidence(queries, pixels)
    return ModelOutputs(
        alpha=evidence.alpha.data,
        beta=evidence.beta.data,
        mask_prob=evidence.mask_prob.data,
        class_logits=queries.class_logits.data,
        embeddings=pixels.F_E.data,
    )


def filter_masks(class_logits: ArrayOrTensor, cfg: Optional[FilterConfig] = None) -> FrozenSet[int]:
    """Indices of masks to reject.

    A mask is rejected when its most likely class is no-object or when that
    class's probability is below the threshold; a probability exactly at the
    threshold is kept.
    """
    cfg = cfg or FilterConfig()
    probs = class_probabilities(class_logits)
    no_object = probs.shape[1] - 1
    best = probs.argmax(axis=1)
    confidence = probs.max(axis=1)
    rejected = (best == no_object) | (confidence < cfg.object_mask_threshold)
    return frozenset(int(i) for i in np.flatnonzero(rejected))


def fuse_uncertainty(
    alpha: ArrayOrTensor,
    beta: ArrayOrTensor,
    class_logits: ArrayOrTensor,
    filtered: Iterable[int] = (),
    thing_classes: Iterable[int] = THING_CLASSES,
) -> Prediction:
    """Fuse surviving masks into a prediction with per-pixel uncertainty.

    At each pixel i* is the surviving mask with the largest alpha (lowest
    index on ties), p_M = alpha/(alpha+beta) at i*, p_C is the highest
    real-class probability of i*, and U = -p_C * p_M.

    Each surviving thing-class mask that wins at least one pixel becomes one
    instance; ids are assigned in mask order starting at 1.
    """
    alpha, beta = _array(alpha), _array(beta)
    probs = class_probabilities(class_logits)
    num_masks = alpha.shape[0]
    filtered = frozenset(int(i) for i in filtered)

    survivors = np.array([i for i in range(num_masks) if i not in filtered], dtype=np.int64)
    fallback = survivors.size == 0
    if fallback:
        logger.warning("All masks were filtered out; fusing over the unfiltered mask set")
        survivors = np.arange(num_masks)

    winner = survivors[np.argmax(alpha[survivors], axis=0)]
    pixels = np.arange(alpha.shape[1])
    a, b = alpha[winner, pixels], beta[winner, pixels]
    p_mask = a / (a + b)

    real = probs[:, :-1]
    mask_classes = real.argmax(axis=1)
    mask_confidence = real.max(axis=1)
    uncertainty = -mask_confidence[winner] * p_mask

    seg_class = mask_classes[winner]
    seg_instance = np.zeros_like(seg_class)
    instances: Dict[int, Tuple[int, int]] = {}
    things = set(int(c) for c in thing_classes)
    next_id = 1
    for i in survivors:
        cls = int(mask_classes[i])
        won = winner == i
        if cls in things and won.any():
            seg_instance[won] = next_id
            instances[next_id] = (int(i), cls)
            next_id += 1

    return Prediction(
        seg_class=seg_class,
        seg_instance=seg_instance,
        uncertainty=uncertainty,
        mask_classes=mask_classes,
        mask_confidence=mask_confidence,
        filtered=filtered,
        fallback=fallback,
        winner=winner,
        low_confidence=np.flatnonzero(p_mask < 0.5),
        instances=instances,
    )


def predict(
    outputs: ModelOutputs,
    cfg: Optional[FilterConfig] = None,
    mask_filtering: bool = True,
    thing_classes: Iterable[int] = THING_CLASSES,
) -> Prediction:
    """Filter and fuse one image's model outputs."""
    filtered = filter_masks(outputs.class_logits, cfg) if mask_filtering else frozenset()
    return fuse_uncertainty(outputs.alpha, outputs.beta, outputs.class_logits, filtered, thing_classes)
