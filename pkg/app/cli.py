"""
Evidential Segmenter - Command-Line Entry Point

Generates the synthetic dataset, trains the segmenter, runs inference on
single images, computes training-split statistics and evaluates splits.

Usage:
    python -m app.cli gen   --out data [--seed 0] [--counts 500 50 50] [--force]
    python -m app.cli train --data data --out runs/a [--config run.cfg] [--steps N] [--seed S]
    python -m app.cli stats --model runs/a/model.p2fm --data data --out runs/a/stats.json
    python -m app.cli infer --model runs/a/model.p2fm --image x.ppm --out out/ [--cluster] [--stats ...]
    python -m app.cli eval  --model runs/a/model.p2fm --data data --split val_open --scorer p2f --out report.json

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from app.core.config import RunConfig, dump_run_config, load_run_config, override_run_config
from app.core.errors import ConfigError, DataError, P2FError
from app.core.rng import Rng
from app.models.schemas import SCORERS, DatasetManifest, LogitStats, SplitManifest
from app.services.data.io import (
    load_split,
    read_manifest,
    read_ppm,
    save_split,
    write_manifest,
    write_pgm,
)
from app.services.data.synthetic import SPLITS, SceneSpec, generate_split
from app.services.evaluation.engine import Evaluator, compute_stats
from app.services.evaluation.report import format_report, write_report
from app.services.segmenter.checkpoint import load_model
from app.services.segmenter.model import ModelDims, ModelParams
from app.services.segmenter.optim import OptimizerState
from app.services.segmenter.trainer import BEST_CHECKPOINT, FINAL_CHECKPOINT, train

logger = logging.getLogger(__name__)

DEFAULT_COUNTS = (500, 50, 50)


# =============================================================================
# Commands
# =============================================================================


def cmd_gen(args: argparse.Namespace) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise DataError(f"{out} exists and is not empty; pass --force to overwrite")
        logger.warning(f"Overwriting existing dataset in {out}")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)

    spec = SceneSpec(seed=args.seed, size=args.image_size)
    manifest = DatasetManifest(seed=args.seed, image_size=args.image_size)
    for split, count in zip(SPLITS, args.counts):
        samples = generate_split(spec, split, count)
        digest = save_split(out / split, samples)
        manifest.splits.append(SplitManifest(name=split, count=count, sha256=digest))
        logger.info(f"Wrote {count} {split} images ({digest[:12]})")
    write_manifest(out, manifest)
    return 0


def _run_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None))
    overrides = {k: getattr(args, k, None) for k in ("seed", "steps")}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        cfg = override_run_config(cfg, overrides)
    return cfg


def _split_samples(data: Path, split: str, image_size: Optional[int] = None):
    manifest = read_manifest(data)
    entry = manifest.split(split)
    if entry is None:
        raise DataError(f"split {split!r} is not in {data}/manifest.json")
    if image_size is not None and manifest.image_size != image_size:
        raise DataError(
            f"dataset image size {manifest.image_size} does not match the model's {image_size}"
        )
    return load_split(data / split)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_run_config(cfg), encoding="utf-8")

    samples = _split_samples(Path(args.data), "train", cfg.image_size)
    params = ModelParams.initialize(ModelDims.from_config(cfg), Rng(cfg.seed, "init"))
    opt = OptimizerState.create(params, cfg)
    logger.info(f"Training for {cfg.steps} steps on {len(samples)} images (seed {cfg.seed})")
    try:
        summary = train(params, opt, samples, cfg, out)
    except P2FError:
        logger.error(f"Training aborted; partial log kept in {out}")
        raise
    logger.info(f"Final loss {summary.final_loss}, checkpoints {FINAL_CHECKPOINT} and {BEST_CHECKPOINT}")
    return 0


def _load_stats(path: Optional[str]) -> Optional[LogitStats]:
    if not path:
        return None
    stats_path = Path(path)
    if not stats_path.is_file():
        raise DataError(f"Statistics file not found: {stats_path}")
    try:
        return LogitStats.model_validate_json(stats_path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise DataError(f"{stats_path}: invalid statistics: {e}") from e


def cmd_stats(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    params = load_model(args.model)
    samples = _split_samples(Path(args.data), args.split, params.dims.image_size)
    if args.limit:
        samples = samples[:args.limit]
    stats = compute_stats(params, [image for image, _ in samples], cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(stats.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote statistics to {out}")
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    params = load_model(args.model)
    image, height, width = read_ppm(args.image)
    size = params.dims.image_size
    if (height, width) != (size, size):
        raise DataError(f"image is {width}x{height}, model expects {size}x{size}")

    evaluator = Evaluator(params, cfg, args.scorer, _load_stats(args.stats))
    if args.cluster and evaluator.threshold is None:
        raise ConfigError(f"no threshold available for scorer {args.scorer!r}; pass --stats")
    result = evaluator.process(image, cluster=args.cluster)
    prediction = result.open_prediction if args.cluster and result.open_prediction is not None else result.prediction

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "class.pgm", prediction.seg_class, height, width)
    write_pgm(out / "instance.pgm", prediction.seg_instance, height, width)
    encoded = np.round(255.0 * (result.prediction.uncertainty + 1.0)).astype(np.int64)
    write_pgm(out / "uncertainty.pgm", np.clip(encoded, 0, 255), height, width, maxval=255)

    if args.cluster:
        base = int(result.prediction.seg_instance.max(initial=0))
        instances = [
            {
                "id": base + k + 1,
                "confidence": round(inst.confidence, 6),
                "size": int(inst.pixels.size),
                "pixels": inst.pixels.tolist(),
            }
            for k, inst in enumerate(result.anomalies.instances)
        ]
        payload = {
            "threshold": evaluator.threshold,
            "outliers_reassigned": result.anomalies.outliers_reassigned,
            "instances": instances,
        }
        (out / "instances.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        logger.info(f"Found {len(instances)} anomaly instances")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    params = load_model(args.model)
    evaluator = Evaluator(params, cfg, args.scorer, _load_stats(args.stats))
    samples = _split_samples(Path(args.data), args.split, params.dims.image_size)
    report = evaluator.evaluate(samples, args.split)
    if args.out:
        write_report(report, args.out)
    else:
        sys.stdout.write(format_report(report))
    return 0


# =============================================================================
# Argument parsing
# =============================================================================


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="app.cli", description=__doc__.split("\n\n")[1])
    verbs = parser.add_subparsers(dest="command", required=True)

    gen = verbs.add_parser("gen", help="generate the synthetic dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--counts", type=int, nargs=3, default=list(DEFAULT_COUNTS),
                     metavar=("TRAIN", "VAL_CLOSED", "VAL_OPEN"))
    gen.add_argument("--image-size", type=int, default=64)
    gen.add_argument("--force", action="store_true")
    gen.set_defaults(func=cmd_gen)

    tr = verbs.add_parser("train", help="train a segmenter")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--config")
    tr.add_argument("--steps", type=int)
    tr.add_argument("--seed", type=int)
    tr.set_defaults(func=cmd_train)

    st = verbs.add_parser("stats", help="training-split logit statistics and score calibration")
    st.add_argument("--model", required=True)
    st.add_argument("--data", required=True)
    st.add_argument("--out", required=True)
    st.add_argument("--split", default="train")
    st.add_argument("--limit", type=int, default=0)
    st.add_argument("--config")
    st.set_defaults(func=cmd_stats)

    inf = verbs.add_parser("infer", help="segment one image")
    inf.add_argument("--model", required=True)
    inf.add_argument("--image", required=True)
    inf.add_argument("--out", required=True)
    inf.add_argument("--cluster", action="store_true")
    inf.add_argument("--scorer", choices=SCORERS, default="p2f")
    inf.add_argument("--stats")
    inf.add_argument("--config")
    inf.set_defaults(func=cmd_infer)

    ev = verbs.add_parser("eval", help="evaluate a split")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", choices=SPLITS, required=True)
    ev.add_argument("--scorer", choices=SCORERS, default="p2f")
    ev.add_argument("--out")
    ev.add_argument("--stats")
    ev.add_argument("--config")
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except P2FError as e:
        logger.error(f"{args.command} failed: {e}", exc_info=logger.isEnabledFor(logging.DEBUG))
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
