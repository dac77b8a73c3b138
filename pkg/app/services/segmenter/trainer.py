"""
Trainer

One optimisation step over a batch and the step loop that drives it, with a
CSV loss log and final/best checkpoints.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.config import RunConfig
from app.core.errors import NumericError
from app.core.rng import Rng
from app.models.schemas import LossWeights
from app.services.autodiff import Graph
from app.services.data.synthetic import PanopticLabel, hflip_map, to_binary_masks
from app.services.segmenter.checkpoint import save_model
from app.services.segmenter.criterion import compute_image_loss
from app.services.segmenter.evidence import compute_evidence
from app.services.segmenter.losses import LossParts, total_loss
from app.services.segmenter.model import ModelParams, forward
from app.services.segmenter.optim import OptimizerState, adamw_step

logger = logging.getLogger(__name__)

Sample = Tuple[np.ndarray, PanopticLabel]

LOG_COLUMNS = ("step", "ce", "sdice", "evi", "total")
FINAL_CHECKPOINT = "model.p2fm"
BEST_CHECKPOINT = "best.p2fm"
LOSS_LOG = "train_log.csv"


@dataclass
class StepResult:
    """Pre-update loss of one step."""
    total: float
    parts: Dict[str, float]
    grad_norm: float


@dataclass
class TrainingSummary:
    steps: int
    final_loss: Optional[float]
    best_window_loss: Optional[float]
    best_step: int
    history: List[StepResult] = field(default_factory=list)


def flip_sample(image: np.ndarray, label: PanopticLabel) -> Sample:
    return hflip_map(image, label.height, label.width), label.flipped()


def train_step(
    params: ModelParams,
    opt: OptimizerState,
    batch: Sequence[Sample],
    weights: LossWeights,
    rng: Rng,
    cfg: Optional[RunConfig] = None,
) -> Tuple[ModelParams, OptimizerState, StepResult]:
    """Run one AdamW update on a batch.

    Args:
        params: Parameters, updated in place
        opt: Optimizer state, updated in place
        batch: (image, label) pairs
        weights: Loss weights
        rng: Stream for flips, matching and point sampling of this step
        cfg: Sampling and ablation settings (defaults otherwise)

    Returns:
        The updated parameters and optimizer state and the pre-update loss

    Raises:
        ValueError: If the batch is empty
        NumericError: If a loss term is not finite
    """
    if not batch:
        raise ValueError("train_step needs a non-empty batch")
    cfg = cfg or RunConfig()

    params.zero_grad()
    with Graph():
        per_image: List[LossParts] = []
        for b, (image, label) in enumerate(batch):
            item_rng = rng.spawn("item", b)
            if cfg.hflip_prob > 0.0 and item_rng.random() < cfg.hflip_prob:
                image, label = flip_sample(image, label)
            pixels, queries = forward(params, image)
            evidence = compute_evidence(queries, pixels)
            gt_masks, gt_classes = to_binary_masks(label)
            parts, _ = compute_image_loss(evidence, queries, gt_masks, gt_classes, cfg, item_rng)
            per_image.append(parts)

        parts = LossParts.average(per_image)
        values = parts.values()
        for term, value in values.items():
            if not math.isfinite(value):
                raise NumericError(f"loss term {term} is not finite ({value})")
        loss = total_loss(parts, weights)
        loss.backward()

    norm = adamw_step(params, params.grads(), opt)
    params.assert_finite()
    return params, opt, StepResult(total=loss.item(), parts=values, grad_norm=norm)


def train(
    params: ModelParams,
    opt: OptimizerState,
    samples: Sequence[Sample],
    cfg: RunConfig,
    out_dir: Path,
) -> TrainingSummary:
    """Run `cfg.steps` training steps, writing the loss log and checkpoints.

    The log is flushed after every row, so it survives an aborted run. The best
    checkpoint is the one at the end of the `log_every` window with the lowest
    mean total loss; with no complete window it equals the final checkpoint.
    """
    if not samples:
        raise ValueError("no training samples")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = cfg.loss_weights()
    root = Rng(cfg.seed, "train")
    pool = np.arange(len(samples))

    summary = TrainingSummary(steps=cfg.steps, final_loss=None, best_window_loss=None, best_step=0)
    window: List[float] = []
    with open(out_dir / LOSS_LOG, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(LOG_COLUMNS)
        handle.flush()
        for step in range(1, cfg.steps + 1):
            step_rng = root.spawn("step", step)
            picks = step_rng.spawn("batch").choice(pool, cfg.batch_size)
            batch = [samples[int(k)] for k in picks]
            _, _, result = train_step(params, opt, batch, weights, step_rng, cfg)

            writer.writerow([step] + [f"{result.parts[k]:.6f}" for k in ("ce", "sdice", "evi")] + [f"{result.total:.6f}"])
            handle.flush()
            summary.history.append(result)
            summary.final_loss = result.total
            window.append(result.total)

            if step % cfg.log_every == 0:
                mean_loss = float(np.mean(window))
                window = []
                logger.info(
                    f"step {step}/{cfg.steps}: total={result.total:.4f} "
                    f"ce={result.parts['ce']:.4f} sdice={result.parts['sdice']:.4f} "
                    f"evi={result.parts['evi']:.4f} window_mean={mean_loss:.4f} "
                    f"grad_norm={result.grad_norm:.3f}"
                )
                if summary.best_window_loss is None or mean_loss < summary.best_window_loss:
                    summary.best_window_loss = mean_loss
                    summary.best_step = step
                    save_model(params, out_dir / BEST_CHECKPOINT)

    save_model(params, out_dir / FINAL_CHECKPOINT)
    if summary.best_window_loss is None:
        save_model(params, out_dir / BEST_CHECKPOINT)
        summary.best_step = cfg.steps
    logger.info(f"Training finished after {cfg.steps} steps (best window ends at step {summary.best_step})")
    return summary
