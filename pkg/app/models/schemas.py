"""
Pydantic Schemas

Data models that cross module boundaries or get serialised:
loss/filter/cluster configuration views, the class catalog, dataset
manifests, logit statistics and the metric report.
"""

from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator


class LossWeights(BaseModel):
    """Weights of the combined training objective.

    Attributes:
        lambda_ce: Mask classification cross-entropy weight
        lambda_sdice: Symmetric Dice weight
        lambda_evi: Evidential Beta NLL weight
        no_object_coeff: Down-weighting of no-object classification terms
    """
    lambda_ce: float = Field(2.0, gt=0.0)
    lambda_sdice: float = Field(5.0, gt=0.0)
    lambda_evi: float = Field(0.1, gt=0.0)
    no_object_coeff: float = Field(0.1, gt=0.0, le=1.0)


class FilterConfig(BaseModel):
    """Mask filtering threshold on the winning-class softmax probability."""
    object_mask_threshold: float = Field(0.5, gt=0.0, lt=1.0)


class ClusterConfig(BaseModel):
    """Uncertainty thresholding and cosine DBSCAN parameters."""
    k_sigma: float = 2.0
    eps: float = Field(0.04, gt=0.0)
    min_samples: int = Field(17, ge=1)


class ClassInfo(BaseModel):
    """One entry of the class catalog."""
    id: int
    name: str
    is_thing: bool
    is_ood: bool


class SplitManifest(BaseModel):
    """One dataset split on disk."""
    name: str
    count: int
    sha256: str


class DatasetManifest(BaseModel):
    """Top-level description of a generated dataset."""
    seed: int
    image_size: int
    splits: List[SplitManifest] = Field(default_factory=list)

    def split(self, name: str) -> Optional[SplitManifest]:
        return next((s for s in self.splits if s.name == name), None)


class ScoreCalibration(BaseModel):
    """Mean/std of one scorer's map over the training split."""
    mean: float
    std: float


class LogitStats(BaseModel):
    """Training-split statistics consumed by SML and threshold calibration.

    Attributes:
        mu: Per-class mean of the maximum mask logit
        sigma: Per-class standard deviation of the maximum mask logit
        calibration: Per-scorer mean/std of the anomaly score
        images: Number of training images the statistics cover
    """
    mu: List[float]
    sigma: List[float]
    calibration: Dict[str, ScoreCalibration] = Field(default_factory=dict)
    images: int = 0


# =============================================================================
# Metric results
# =============================================================================


class ClassQuality(BaseModel):
    """Panoptic quality of one class."""
    pq: float
    sq: float
    rq: float
    tp: int
    fp: int
    fn: int


class PanopticResult(BaseModel):
    """PQ family over a set of images.

    `pq`, `sq`, `rq` pool TP/FP/FN and IoU sums over all classes, so
    pq == sq * rq holds exactly; `pq_class_mean` is the per-class average.
    """
    pq: float
    sq: float
    rq: float
    pq_class_mean: float
    tp: int
    fp: int
    fn: int
    per_class: Dict[str, ClassQuality] = Field(default_factory=dict)


class CurvePoint(BaseModel):
    score: float
    tpr: float
    fpr: float
    precision: float


class PixelAnomalyResult(BaseModel):
    ap: float
    fpr_at_95tpr: float
    prevalence: float
    curve: List[CurvePoint] = Field(default_factory=list)


class InstanceMatch(BaseModel):
    """A true-positive pairing at IoU > 0.5."""
    image: int
    prediction: int
    ground_truth: int
    iou: float
    confidence: float


class InstanceAnomalyResult(BaseModel):
    ap: float
    ap50: float
    num_predictions: int
    num_ground_truth: int
    matches: List[InstanceMatch] = Field(default_factory=list)


class MetricReport(BaseModel):
    """Everything `eval` emits for one split."""
    split: str
    scorer: str
    images: int
    config: Dict[str, object]
    metadata: Dict[str, object] = Field(default_factory=dict)
    closed_world: PanopticResult
    miou: float
    anomaly: Optional[Dict[str, object]] = None

    @field_validator("scorer")
    @classmethod
    def _known_scorer(cls, value: str) -> str:
        if value not in SCORERS:
            raise ValueError(f"unknown scorer {value!r}")
        return value


SCORERS: Tuple[str, ...] = ("p2f", "sml", "mm", "eam", "rba", "m2a", "pred", "sigma", "beta", "pm", "pc")
