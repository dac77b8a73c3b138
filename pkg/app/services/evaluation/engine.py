"""
Evaluation Engine

Runs inference, scoring and clustering per image and merges the results
into metric reports and training-split statistics.

Images are processed in parallel on a thread pool; `Executor.map` returns
results in input order, and every merge walks them in that order, so reports
do not depend on scheduling.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from app.core.config import RunConfig
from app.core.errors import ConfigError
from app.models.schemas import LogitStats, MetricReport, ScoreCalibration, SCORERS
from app.services.anomaly.baselines import (
    BASELINES,
    VARIANTS,
    baseline_scores,
    logit_statistics,
    standardized_max_logit,
)
from app.services.anomaly.clustering import (
    CONFIDENCE_RULE,
    AnomalyInstances,
    segment_anomalies,
)
from app.services.anomaly.inference import ModelOutputs, Prediction, predict, run_model
from app.services.data.catalog import ANOMALY_CLASS, IND_CLASSES, OOD_CLASSES, VOID
from app.services.data.synthetic import PanopticLabel
from app.services.evaluation.metrics import (
    IOU_THRESHOLDS,
    MeanIoUAccumulator,
    PanopticAccumulator,
    instance_anomaly_ap,
    pixel_anomaly_metrics,
)
from app.services.segmenter.model import ModelParams

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def map_images(fn: Callable[[T], R], items: Sequence[T], workers: int) -> List[R]:
    """Apply `fn` to every item on up to `workers` threads; results keep input order."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    logger.debug(f"Processing {len(items)} images on {workers} workers")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class ImageResult:
    """Everything evaluation needs from one image."""
    prediction: Prediction
    scores: np.ndarray
    anomalies: Optional[AnomalyInstances] = None
    open_prediction: Optional[Prediction] = None


class Evaluator:
    """Inference plus anomaly scoring for one model, scorer and configuration.

    The instance threshold comes from the training-split calibration of the
    scorer when statistics are given. Without statistics, `p2f` falls back to
    the configured `uncertainty_threshold` and the baselines skip clustering.
    """

    def __init__(self, params: ModelParams, cfg: RunConfig, scorer: str = "p2f",
                 stats: Optional[LogitStats] = None):
        if scorer not in SCORERS:
            raise ConfigError(f"unknown scorer {scorer!r}; expected one of {SCORERS}")
        if scorer == "sml" and stats is None:
            raise ConfigError(
                "scorer 'sml' needs training logit statistics: run "
                "`python -m app.cli stats --model ... --data ... --out stats.json` "
                "and pass --stats"
            )
        self.params = params
        self.cfg = cfg
        self.scorer = scorer
        self.stats = stats
        self.threshold, self.threshold_source = self._resolve_threshold()

    def _resolve_threshold(self) -> Tuple[Optional[float], str]:
        calibration = self.stats.calibration.get(self.scorer) if self.stats else None
        if calibration is not None:
            return calibration.mean + self.cfg.k_sigma * calibration.std, "calibrated"
        if self.scorer == "p2f":
            return self.cfg.uncertainty_threshold, "config"
        logger.warning(f"No calibration for scorer {self.scorer!r}; anomaly instances are skipped")
        return None, "none"

    def score(self, outputs: ModelOutputs, prediction: Prediction) -> np.ndarray:
        if self.scorer == "p2f":
            return prediction.uncertainty
        return baseline_scores(self.scorer, outputs, self.stats, prediction)

    def process(self, image: np.ndarray, cluster: bool = True) -> ImageResult:
        outputs = run_model(self.params, image)
        prediction = predict(outputs, self.cfg.filter_config(), self.cfg.mask_filtering)
        scores = self.score(outputs, prediction)
        result = ImageResult(prediction=prediction, scores=scores)
        if cluster and self.threshold is not None:
            result.anomalies, result.open_prediction = segment_anomalies(
                prediction, outputs.embeddings, self.threshold, self.cfg.cluster_config(), scores
            )
        return result

    def evaluate(self, samples: Sequence[Tuple[np.ndarray, PanopticLabel]], split: str) -> MetricReport:
        """Metric report of a split; the anomaly section appears when the split holds held-out pixels."""
        labels = [label for _, label in samples]
        open_split = any(np.isin(label.class_map, list(OOD_CLASSES)).any() for label in labels)
        results = map_images(
            lambda image: self.process(image, cluster=open_split),
            [image for image, _ in samples],
            self.cfg.workers,
        )

        closed = PanopticAccumulator(IND_CLASSES)
        miou = MeanIoUAccumulator(IND_CLASSES)
        for result, label in zip(results, labels):
            gt_class = np.where(np.isin(label.class_map, list(OOD_CLASSES)), VOID, label.class_map)
            closed.update(result.prediction.seg_class, result.prediction.seg_instance, gt_class, label.instance_map)
            miou.update(result.prediction.seg_class, gt_class)

        fallback = sum(r.prediction.fallback for r in results)
        if fallback:
            logger.warning(f"{fallback} images had every mask filtered out")

        report = MetricReport(
            split=split,
            scorer=self.scorer,
            images=len(samples),
            config=self.cfg.model_dump(),
            metadata={
                "iou_thresholds": list(IOU_THRESHOLDS),
                "confidence_rule": CONFIDENCE_RULE,
                "threshold_source": self.threshold_source,
                "fallback_images": fallback,
            },
            closed_world=closed.result(),
            miou=miou.result(),
        )
        if open_split:
            report.anomaly = self._anomaly_section(results, labels)
        logger.info(
            f"{split}: PQ={report.closed_world.pq:.4f} SQ={report.closed_world.sq:.4f} "
            f"RQ={report.closed_world.rq:.4f} mIoU={report.miou:.4f}"
        )
        if report.closed_world.pq < self.cfg.pq_target:
            logger.warning(f"{split}: PQ {report.closed_world.pq:.4f} is below the target {self.cfg.pq_target}")
        return report

    def _anomaly_section(self, results: List[ImageResult], labels: List[PanopticLabel]) -> Dict[str, object]:
        scores = np.concatenate([r.scores for r in results])
        uncertainty = np.concatenate([r.prediction.uncertainty for r in results])
        gt_ood = np.concatenate([np.isin(l.class_map, list(OOD_CLASSES)) for l in labels])
        roi = np.concatenate([l.class_map != VOID for l in labels])
        pixel = pixel_anomaly_metrics(scores, gt_ood, roi)

        section: Dict[str, object] = {
            "pixel": pixel.model_dump(),
            "mean_score_ood": float(scores[gt_ood].mean()),
            "mean_score_ind": float(scores[roi & ~gt_ood].mean()),
            "mean_uncertainty_ood": float(uncertainty[gt_ood].mean()),
            "mean_uncertainty_ind": float(uncertainty[roi & ~gt_ood].mean()),
            "threshold": self.threshold,
            "instance": None,
            "open_world": None,
        }
        if self.threshold is None:
            return section

        predictions = [
            [(inst.pixels, inst.confidence) for inst in r.anomalies.instances] for r in results
        ]
        ground_truth = [l.ood_instances() for l in labels]
        section["instance"] = instance_anomaly_ap(predictions, ground_truth).model_dump()

        open_world = PanopticAccumulator(set(IND_CLASSES) | {ANOMALY_CLASS})
        for result, label in zip(results, labels):
            gt_class = np.where(np.isin(label.class_map, list(OOD_CLASSES)), ANOMALY_CLASS, label.class_map)
            pred = result.open_prediction
            open_world.update(pred.seg_class, pred.seg_instance, gt_class, label.instance_map)
        section["open_world"] = open_world.result().model_dump()
        return section


# =============================================================================
# Training-split statistics
# =============================================================================


@dataclass
class _Moments:
    """Count, mean and sum of squared deviations; merged pairwise."""
    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def of(cls, values: np.ndarray) -> "_Moments":
        if values.size == 0:
            return cls()
        mean = float(values.mean())
        return cls(values.size, mean, float(((values - mean) ** 2).sum()))

    def merge(self, other: "_Moments") -> "_Moments":
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        n = self.count + other.count
        delta = other.mean - self.mean
        return _Moments(
            n,
            self.mean + delta * other.count / n,
            self.m2 + other.m2 + delta * delta * self.count * other.count / n,
        )

    def calibration(self) -> ScoreCalibration:
        std = (self.m2 / self.count) ** 0.5 if self.count else 0.0
        if std == 0.0:
            logger.warning(f"Calibration sample is constant ({self.mean:.6f})")
        return ScoreCalibration(mean=self.mean, std=std)


def compute_stats(params: ModelParams, images: Sequence[np.ndarray], cfg: RunConfig) -> LogitStats:
    """SML logit statistics and per-scorer score calibration over training images."""
    if not images:
        raise ConfigError("statistics need at least one training image")

    def first_pass(image: np.ndarray):
        outputs = run_model(params, image)
        prediction = predict(outputs, cfg.filter_config(), cfg.mask_filtering)
        maps = {"p2f": prediction.uncertainty}
        for kind in BASELINES + VARIANTS:
            if kind != "sml":
                maps[kind] = baseline_scores(kind, outputs, prediction=prediction)
        return outputs.logits(), {k: _Moments.of(v) for k, v in maps.items()}

    passes = map_images(first_pass, list(images), cfg.workers)
    stats = logit_statistics((logits for logits, _ in passes), params.dims.num_classes)

    moments: Dict[str, _Moments] = {}
    for logits, per_image in passes:
        sml = standardized_max_logit(logits, stats)
        per_image = dict(per_image, sml=_Moments.of(sml))
        for kind, m in per_image.items():
            moments[kind] = moments.get(kind, _Moments()).merge(m)

    stats.calibration = {kind: moments[kind].calibration() for kind in SCORERS}
    logger.info(f"Computed statistics over {len(images)} training images")
    return stats

