"""
Evaluation Metrics

Panoptic quality (with SQ/RQ), semantic mIoU, pixel-level anomaly AP and
FPR at 95% TPR, and instance-level anomaly AP averaged over IoU thresholds.

Panoptic and mIoU results accumulate per image and are read out once, so a
split can be fed image by image in any fixed order.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from sklearn.metrics import average_precision_score, roc_curve

from app.core.errors import DataError
from app.models.schemas import (
    ClassQuality,
    CurvePoint,
    InstanceAnomalyResult,
    InstanceMatch,
    PanopticResult,
    PixelAnomalyResult,
)
from app.services.data.catalog import VOID, class_name

logger = logging.getLogger(__name__)

MATCH_IOU = 0.5
IOU_THRESHOLDS: Tuple[float, ...] = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
MAX_CURVE_POINTS = 101

# Segment key = class * _KEY_BASE + instance
_KEY_BASE = 1 << 20


# =============================================================================
# Panoptic quality
# =============================================================================


@dataclass
class _ClassTally:
    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0


class PanopticAccumulator:
    """Accumulates PQ matching over images for a fixed class set.

    Segments match when they share a class and their IoU exceeds 0.5. Void
    ground-truth pixels are left out of every IoU; a predicted segment that is
    more than half void is neither matched nor counted as a false positive.
    """

    def __init__(self, classes: Iterable[int], void: int = VOID):
        self.classes = sorted(set(int(c) for c in classes))
        if not self.classes:
            raise ValueError("panoptic quality needs a non-empty class set")
        self.void = void
        self.tally: Dict[int, _ClassTally] = {c: _ClassTally() for c in self.classes}

    def update(self, pred_class, pred_instance, gt_class, gt_instance) -> None:
        pred_class = np.asarray(pred_class, dtype=np.int64).reshape(-1)
        pred_instance = np.asarray(pred_instance, dtype=np.int64).reshape(-1)
        gt_class = np.asarray(gt_class, dtype=np.int64).reshape(-1)
        gt_instance = np.asarray(gt_instance, dtype=np.int64).reshape(-1)
        if not (pred_class.shape == pred_instance.shape == gt_class.shape == gt_instance.shape):
            raise DataError("prediction and ground truth differ in resolution")

        known = np.array(self.classes)
        gt_void = gt_class == self.void
        pred_in = np.isin(pred_class, known)
        gt_in = ~gt_void & np.isin(gt_class, known)

        pred_key = pred_class * _KEY_BASE + pred_instance
        gt_key = gt_class * _KEY_BASE + gt_instance

        pred_area = _counts(pred_key[pred_in])
        pred_void = _counts(pred_key[pred_in & gt_void])
        gt_area = _counts(gt_key[gt_in])

        both = pred_in & gt_in & (pred_class == gt_class)
        pairs = np.stack([pred_key[both], gt_key[both]])
        pairs, overlap = np.unique(pairs, axis=1, return_counts=True)

        matched_pred, matched_gt = set(), set()
        for (pk, gk), inter in zip(pairs.T, overlap):
            pk, gk = int(pk), int(gk)
            union = (pred_area[pk] - pred_void.get(pk, 0)) + gt_area[gk] - int(inter)
            iou = inter / union
            if iou > MATCH_IOU:
                tally = self.tally[gk // _KEY_BASE]
                tally.tp += 1
                tally.iou_sum += float(iou)
                matched_pred.add(pk)
                matched_gt.add(gk)

        for gk in gt_area:
            if gk not in matched_gt:
                self.tally[gk // _KEY_BASE].fn += 1
        for pk, area in pred_area.items():
            if pk in matched_pred:
                continue
            if pred_void.get(pk, 0) / area > 0.5:
                continue
            self.tally[pk // _KEY_BASE].fp += 1

    def result(self) -> PanopticResult:
        per_class: Dict[str, ClassQuality] = {}
        iou_sum, tp, fp, fn = 0.0, 0, 0, 0
        class_pq: List[float] = []
        for c in self.classes:
            t = self.tally[c]
            iou_sum += t.iou_sum
            tp, fp, fn = tp + t.tp, fp + t.fp, fn + t.fn
            if t.tp + t.fp + t.fn == 0:
                continue
            sq, rq = _sq_rq(t.iou_sum, t.tp, t.fp, t.fn)
            per_class[class_name(c)] = ClassQuality(pq=sq * rq, sq=sq, rq=rq, tp=t.tp, fp=t.fp, fn=t.fn)
            class_pq.append(sq * rq)

        sq, rq = _sq_rq(iou_sum, tp, fp, fn)
        return PanopticResult(
            pq=sq * rq,
            sq=sq,
            rq=rq,
            pq_class_mean=float(np.mean(class_pq)) if class_pq else 0.0,
            tp=tp,
            fp=fp,
            fn=fn,
            per_class=per_class,
        )


def _counts(keys: np.ndarray) -> Dict[int, int]:
    values, counts = np.unique(keys, return_counts=True)
    return {int(v): int(n) for v, n in zip(values, counts)}


def _sq_rq(iou_sum: float, tp: int, fp: int, fn: int) -> Tuple[float, float]:
    sq = iou_sum / tp if tp else 0.0
    denominator = tp + 0.5 * fp + 0.5 * fn
    rq = tp / denominator if denominator else 0.0
    return sq, rq


def panoptic_quality(pred_class, pred_instance, gt_class, gt_instance, classes: Iterable[int]) -> PanopticResult:
    """PQ/SQ/RQ of a single image."""
    acc = PanopticAccumulator(classes)
    acc.update(pred_class, pred_instance, gt_class, gt_instance)
    return acc.result()


class MeanIoUAccumulator:
    """Semantic IoU per class over non-void pixels; mIoU averages classes with a non-empty union."""

    def __init__(self, classes: Iterable[int], void: int = VOID):
        self.classes = sorted(set(int(c) for c in classes))
        self.void = void
        self.intersection = defaultdict(int)
        self.union = defaultdict(int)

    def update(self, pred_class, gt_class) -> None:
        pred_class = np.asarray(pred_class).reshape(-1)
        gt_class = np.asarray(gt_class).reshape(-1)
        valid = gt_class != self.void
        for c in self.classes:
            p, g = (pred_class == c) & valid, (gt_class == c) & valid
            self.intersection[c] += int(np.count_nonzero(p & g))
            self.union[c] += int(np.count_nonzero(p | g))

    def result(self) -> float:
        ious = [self.intersection[c] / self.union[c] for c in self.classes if self.union[c] > 0]
        return float(np.mean(ious)) if ious else 0.0


def mean_iou(pred_class, gt_class, classes: Iterable[int]) -> float:
    acc = MeanIoUAccumulator(classes)
    acc.update(pred_class, gt_class)
    return acc.result()


# =============================================================================
# Pixel-level anomaly detection
# =============================================================================


def pixel_anomaly_metrics(scores, gt_anomaly, roi=None) -> PixelAnomalyResult:
    """Average precision and FPR at 95% TPR over the pixels inside `roi`.

    AP is scikit-learn's step-wise average precision. FPR95 is read off the ROC
    curve at the first threshold (from the top) at which TPR reaches 0.95.

    Raises:
        DataError: If the roi holds no anomalous or no normal pixels
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(gt_anomaly, dtype=bool).reshape(-1)
    if roi is not None:
        keep = np.asarray(roi, dtype=bool).reshape(-1)
        scores, labels = scores[keep], labels[keep]
    positives = int(np.count_nonzero(labels))
    negatives = labels.size - positives
    if positives == 0:
        raise DataError("pixel anomaly metrics: no anomalous (positive) pixels in the region of interest")
    if negatives == 0:
        raise DataError("pixel anomaly metrics: no normal (negative) pixels in the region of interest")

    ap = float(average_precision_score(labels, scores))
    fpr, tpr, thresholds = roc_curve(labels, scores, drop_intermediate=False)
    # first point is the (0, 0) corner at an infinite threshold
    fpr, tpr, thresholds = fpr[1:], tpr[1:], thresholds[1:]
    tps = np.rint(tpr * positives)
    fps = np.rint(fpr * negatives)
    precision = tps / (tps + fps)

    reached = np.flatnonzero(tps * 20 >= positives * 19)
    fpr95 = float(fpr[reached[0]])

    picks = np.unique(np.linspace(0, thresholds.size - 1, min(MAX_CURVE_POINTS, thresholds.size)).round().astype(int))
    curve = [
        CurvePoint(score=float(thresholds[k]), tpr=float(tpr[k]), fpr=float(fpr[k]), precision=float(precision[k]))
        for k in picks
    ]
    return PixelAnomalyResult(ap=ap, fpr_at_95tpr=fpr95, prevalence=positives / labels.size, curve=curve)


# =============================================================================
# Instance-level anomaly detection
# =============================================================================


@dataclass
class _Candidate:
    image: int
    index: int
    confidence: float
    pixels: np.ndarray
    ious: np.ndarray = field(default_factory=lambda: np.empty(0))


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.intersect1d(a, b, assume_unique=True).size
    union = a.size + b.size - inter
    return inter / union if union else 0.0


def _average_precision(hits: Sequence[bool], num_gt: int) -> float:
    if num_gt == 0:
        return 0.0
    hits = np.asarray(hits, dtype=bool)
    if hits.size == 0:
        return 0.0
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, hits.size + 1)
    recall = tp / num_gt
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def instance_anomaly_ap(
    predictions: Sequence[Sequence[Tuple[np.ndarray, float]]],
    ground_truth: Sequence[Sequence[np.ndarray]],
    thresholds: Sequence[float] = IOU_THRESHOLDS,
) -> InstanceAnomalyResult:
    """Instance AP over all images, averaged over IoU thresholds, plus AP50.

    Predictions are ranked by descending confidence (ties by image, then by
    first pixel). Each one claims the unmatched ground-truth instance of its
    image with the highest IoU above the threshold; everything else is a false
    positive.

    Args:
        predictions: Per image, (pixel indices, confidence) of each predicted instance
        ground_truth: Per image, pixel indices of each ground-truth instance
        thresholds: IoU thresholds to average over
    """
    if len(predictions) != len(ground_truth):
        raise DataError(f"{len(predictions)} prediction lists for {len(ground_truth)} images")

    candidates: List[_Candidate] = []
    for image, (preds, gts) in enumerate(zip(predictions, ground_truth)):
        gts = [np.unique(np.asarray(g, dtype=np.int64)) for g in gts]
        for index, (pixels, confidence) in enumerate(preds):
            if not np.isfinite(confidence):
                raise DataError(f"image {image}: non-finite instance confidence")
            pixels = np.unique(np.asarray(pixels, dtype=np.int64))
            cand = _Candidate(image, index, float(confidence), pixels)
            cand.ious = np.array([_iou(pixels, g) for g in gts])
            candidates.append(cand)
    candidates.sort(key=lambda c: (-c.confidence, c.image, int(c.pixels[0]) if c.pixels.size else -1, c.pixels.size))
    num_gt = sum(len(g) for g in ground_truth)
    if num_gt == 0:
        logger.warning("Instance AP: no ground-truth instances; AP is 0")

    def sweep(threshold: float) -> Tuple[List[bool], List[InstanceMatch]]:
        claimed = set()
        hits, matches = [], []
        for cand in candidates:
            best, best_iou = -1, threshold
            for g, iou in enumerate(cand.ious):
                if (cand.image, g) not in claimed and iou > best_iou:
                    best, best_iou = g, iou
            hits.append(best >= 0)
            if best >= 0:
                claimed.add((cand.image, best))
                matches.append(InstanceMatch(
                    image=cand.image, prediction=cand.index, ground_truth=best,
                    iou=float(best_iou), confidence=cand.confidence,
                ))
        return hits, matches

    aps = [_average_precision(sweep(threshold)[0], num_gt) for threshold in thresholds]
    hits50, matches50 = sweep(MATCH_IOU)
    ap50 = _average_precision(hits50, num_gt)

    return InstanceAnomalyResult(
        ap=float(np.mean(aps)) if aps else 0.0,
        ap50=ap50,
        num_predictions=len(candidates),
        num_ground_truth=num_gt,
        matches=matches50,
    )
