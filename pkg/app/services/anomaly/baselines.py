"""
Baseline Anomaly Scorers

Pixel scores from established mask-based baselines, all built on the same
per-pixel class logits L[c] = sum_i softmax_i(c) * M_i. Higher scores mean
more anomalous.

    sml  standardized max logit   -(L_max - mu_c) / sigma_c at the winning class
    mm   max mask                 -max_i M_i
    eam  ensemble over masks      -sum_i M_i * max_c p_i(c)
    rba  rejected by all          -sum_c tanh(L_c)
    m2a  mask-to-anomaly          (1 - max_c L_c) * [any M_i > 0.5]

The uncertainty variants take apart the fused p2f score. They need the fused
prediction, whose winner i* is the surviving mask with the largest alpha:

    pred   prediction uncertainty  -max_c L_c
    sigma  mask-probability winner -p_C * M at the surviving mask with the largest M
    beta   raw evidence            -(alpha + beta) at i*
    pm     mask part only          -p_M at i*
    pc     class part only         -p_C at i*
"""

import logging
from typing import Iterable, List, Optional

import numpy as np

from app.core.errors import ConfigError, DataError
from app.models.schemas import LogitStats
from app.services.anomaly.inference import ModelOutputs, Prediction, run_model
from app.services.segmenter.evidence import class_probabilities
from app.services.segmenter.model import ModelParams

logger = logging.getLogger(__name__)

BASELINES = ("sml", "mm", "eam", "rba", "m2a")
VARIANTS = ("pred", "sigma", "beta", "pm", "pc")


def baseline_scores(
    kind: str,
    outputs: ModelOutputs,
    stats: Optional[LogitStats] = None,
    prediction: Optional[Prediction] = None,
) -> np.ndarray:
    """Per-pixel anomaly score [H*W] of a baseline scorer or uncertainty variant.

    Raises:
        ConfigError: For an unknown scorer, `sml` without statistics, or a
            variant without the fused prediction
    """
    if kind in VARIANTS:
        if prediction is None:
            raise ConfigError(f"the {kind} scorer needs the fused prediction of the image")
        return variant_scores(kind, outputs, prediction)
    masks = outputs.mask_prob
    if kind == "mm":
        return -masks.max(axis=0)
    if kind == "eam":
        confidence = class_probabilities(outputs.class_logits)[:, :-1].max(axis=1)
        return -(confidence[:, None] * masks).sum(axis=0)

    logits = outputs.logits()
    if kind == "rba":
        return -np.tanh(logits).sum(axis=0)
    if kind == "m2a":
        has_mask = (masks > 0.5).any(axis=0)
        return (1.0 - logits.max(axis=0)) * has_mask
    if kind == "sml":
        if stats is None:
            raise ConfigError("the sml scorer needs logit statistics; run the `stats` command first")
        return standardized_max_logit(logits, stats)
    raise ConfigError(f"unknown baseline scorer {kind!r}; expected one of {BASELINES + VARIANTS}")


def variant_scores(kind: str, outputs: ModelOutputs, prediction: Prediction) -> np.ndarray:
    """Per-pixel score [H*W] of one part or variant of the fused uncertainty."""
    pixels = np.arange(outputs.alpha.shape[1])
    winner = prediction.winner
    if kind == "pred":
        return -outputs.logits().max(axis=0)
    if kind == "beta":
        return -(outputs.alpha[winner, pixels] + outputs.beta[winner, pixels])
    if kind == "pm":
        return -outputs.mask_prob[winner, pixels]
    if kind == "pc":
        return -prediction.mask_confidence[winner]
    if kind == "sigma":
        survivors = np.array(
            [i for i in range(outputs.alpha.shape[0]) if prediction.fallback or i not in prediction.filtered],
            dtype=np.int64,
        )
        top = survivors[np.argmax(outputs.mask_prob[survivors], axis=0)]
        return -prediction.mask_confidence[top] * outputs.mask_prob[top, pixels]
    raise ConfigError(f"unknown uncertainty variant {kind!r}; expected one of {VARIANTS}")


def standardized_max_logit(logits: np.ndarray, stats: LogitStats) -> np.ndarray:
    num_classes = logits.shape[0]
    if len(stats.mu) != num_classes or len(stats.sigma) != num_classes:
        raise DataError(
            f"logit statistics cover {len(stats.mu)} classes, model predicts {num_classes}"
        )
    mu = np.asarray(stats.mu)
    sigma = np.asarray(stats.sigma, dtype=np.float64)
    if np.any(sigma == 0.0):
        logger.warning(f"SML: zero sigma for classes {np.flatnonzero(sigma == 0.0).tolist()}; using 1")
        sigma = np.where(sigma == 0.0, 1.0, sigma)
    winner = logits.argmax(axis=0)
    top = logits.max(axis=0)
    return -(top - mu[winner]) / sigma[winner]


def logit_statistics(logit_maps: Iterable[np.ndarray], num_classes: int) -> LogitStats:
    """Per-class mean and population std of the max logit over pixels that class wins.

    A class that never wins gets mu = 0, sigma = 1; a class with constant max
    logit gets sigma = 1. Both cases are logged as warnings.
    """
    per_class: List[List[np.ndarray]] = [[] for _ in range(num_classes)]
    images = 0
    for logits in logit_maps:
        images += 1
        winner = logits.argmax(axis=0)
        top = logits.max(axis=0)
        for c in range(num_classes):
            per_class[c].append(top[winner == c])
    if images == 0:
        raise DataError("logit statistics need at least one image")

    mu, sigma = [], []
    for c, chunks in enumerate(per_class):
        values = np.concatenate(chunks) if chunks else np.empty(0)
        if values.size == 0:
            logger.warning(f"Class {c} is never the argmax; using mu=0, sigma=1")
            mu.append(0.0)
            sigma.append(1.0)
            continue
        std = float(values.std())
        if std == 0.0:
            logger.warning(f"Class {c} has constant max logit {values[0]:.6f}; using sigma=1")
            std = 1.0
        mu.append(float(values.mean()))
        sigma.append(std)
    return LogitStats(mu=mu, sigma=sigma, images=images)


def collect_logit_stats(params: ModelParams, images: Iterable[np.ndarray]) -> LogitStats:
    """SML statistics of a model over training images."""
    return logit_statistics(
        (run_model(params, image).logits() for image in images), params.dims.num_classes
    )
