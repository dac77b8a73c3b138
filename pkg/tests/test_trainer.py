import csv

import numpy as np
import pytest

from app.core.errors import NumericError
from app.core.rng import Rng
from app.services.data.synthetic import SceneSpec, generate_split
from app.services.segmenter import trainer as trainer_module
from app.services.segmenter.checkpoint import encode_checkpoint, load_model
from app.services.segmenter.model import ModelDims, ModelParams
from app.services.segmenter.optim import OptimizerState
from app.services.segmenter.trainer import (
    BEST_CHECKPOINT,
    FINAL_CHECKPOINT,
    LOG_COLUMNS,
    LOSS_LOG,
    flip_sample,
    train,
    train_step,
)
from tests.conftest import make_scene


def _fresh(cfg):
    params = ModelParams.initialize(ModelDims.from_config(cfg), Rng(cfg.seed, "init"))
    return params, OptimizerState.create(params, cfg)


def _snapshot(params):
    return {name: t.data.copy() for name, t in params.items()}


def test_zero_learning_rate_leaves_parameters_untouched(tiny_config):
    cfg = tiny_config.model_copy(update={"lr": 0.0})
    params, opt = _fresh(cfg)
    before = _snapshot(params)
    _, _, result = train_step(params, opt, [make_scene()], cfg.loss_weights(), Rng(0), cfg)
    for name, values in before.items():
        assert np.array_equal(params[name].data, values)
    assert np.isfinite(result.total)
    assert set(result.parts) == {"ce", "sdice", "evi"}


def test_step_reports_the_weighted_total(tiny_config):
    params, opt = _fresh(tiny_config)
    weights = tiny_config.loss_weights()
    _, _, result = train_step(params, opt, [make_scene()], weights, Rng(0), tiny_config)
    expected = (
        weights.lambda_ce * result.parts["ce"]
        + weights.lambda_sdice * result.parts["sdice"]
        + weights.lambda_evi * result.parts["evi"]
    )
    assert result.total == pytest.approx(expected, rel=1e-12)
    assert result.grad_norm > 0.0


def test_loose_clipping_thresholds_agree(tiny_config):
    runs = []
    for clip in (1e9, 1e12):
        cfg = tiny_config.model_copy(update={"grad_clip": clip})
        params, opt = _fresh(cfg)
        for step in range(3):
            train_step(params, opt, [make_scene()], cfg.loss_weights(), Rng(0, step), cfg)
        runs.append(_snapshot(params))
    for name in runs[0]:
        assert np.array_equal(runs[0][name], runs[1][name])


def test_repeated_steps_are_reproducible(tiny_config):
    runs = []
    for _ in range(2):
        params, opt = _fresh(tiny_config)
        totals = []
        for step in range(5):
            _, _, result = train_step(params, opt, [make_scene()], tiny_config.loss_weights(), Rng(9, step), tiny_config)
            totals.append(result.total)
        runs.append((totals, _snapshot(params)))
    assert runs[0][0] == runs[1][0]
    for name in runs[0][1]:
        assert np.array_equal(runs[0][1][name], runs[1][1][name])


@pytest.mark.slow
def test_steps_on_one_batch_drive_the_loss_down(tiny_config):
    cfg = tiny_config.model_copy(update={"hflip_prob": 0.0})
    params, opt = _fresh(cfg)
    batch = [make_scene()]
    totals = []
    for step in range(200):
        _, _, result = train_step(params, opt, batch, cfg.loss_weights(), Rng(0, step), cfg)
        totals.append(result.total)
    assert np.mean(totals[-20:]) < 0.7 * np.mean(totals[:20])


def test_non_finite_loss_aborts_the_step(tiny_config, monkeypatch):
    original = trainer_module.compute_image_loss

    def poisoned(*args, **kwargs):
        parts, matched = original(*args, **kwargs)
        parts.evi = parts.evi * float("nan")
        return parts, matched

    monkeypatch.setattr(trainer_module, "compute_image_loss", poisoned)
    params, opt = _fresh(tiny_config)
    with pytest.raises(NumericError, match="evi"):
        train_step(params, opt, [make_scene()], tiny_config.loss_weights(), Rng(0), tiny_config)


def test_empty_batch_is_rejected(tiny_config):
    params, opt = _fresh(tiny_config)
    with pytest.raises(ValueError):
        train_step(params, opt, [], tiny_config.loss_weights(), Rng(0), tiny_config)


def test_flip_sample_mirrors_image_and_label():
    image, label = make_scene()
    flipped_image, flipped_label = flip_sample(image, label)
    grid = image.reshape(3, 8, 8)
    assert np.array_equal(flipped_image.reshape(3, 8, 8), grid[:, :, ::-1])
    assert np.array_equal(flipped_label.class_map.reshape(8, 8), label.class_map.reshape(8, 8)[:, ::-1])


@pytest.fixture
def tiny_samples():
    return generate_split(SceneSpec(seed=1, size=16), "train", 4)


@pytest.fixture
def small_config(tiny_config):
    return tiny_config.model_copy(update={"image_size": 16, "steps": 6, "log_every": 2, "batch_size": 2})


def test_train_writes_log_and_checkpoints(small_config, tiny_samples, tmp_path):
    params, opt = _fresh(small_config)
    summary = train(params, opt, tiny_samples, small_config, tmp_path)

    with open(tmp_path / LOSS_LOG, newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert [int(r[0]) for r in rows[1:]] == list(range(1, 7))
    assert len(summary.history) == 6
    assert summary.final_loss == pytest.approx(float(rows[-1][-1]), abs=1e-6)
    assert summary.best_step in (2, 4, 6)

    final = load_model(tmp_path / FINAL_CHECKPOINT)
    assert encode_checkpoint(final) == encode_checkpoint(params)
    assert (tmp_path / BEST_CHECKPOINT).is_file()


def test_training_is_deterministic(small_config, tiny_samples, tmp_path):
    blobs, logs = [], []
    for run in ("a", "b"):
        params, opt = _fresh(small_config)
        train(params, opt, tiny_samples, small_config, tmp_path / run)
        blobs.append((tmp_path / run / FINAL_CHECKPOINT).read_bytes())
        logs.append((tmp_path / run / LOSS_LOG).read_text(encoding="utf-8"))
    assert blobs[0] == blobs[1]
    assert logs[0] == logs[1]


def test_zero_steps_saves_the_initial_model(small_config, tiny_samples, tmp_path):
    cfg = small_config.model_copy(update={"steps": 0})
    params, opt = _fresh(cfg)
    initial = encode_checkpoint(params)
    summary = train(params, opt, tiny_samples, cfg, tmp_path)
    assert summary.final_loss is None
    assert (tmp_path / FINAL_CHECKPOINT).read_bytes() == initial
    assert (tmp_path / BEST_CHECKPOINT).read_bytes() == initial
    assert (tmp_path / LOSS_LOG).read_text(encoding="utf-8").strip() == ",".join(LOG_COLUMNS)


def test_loss_goes_down_on_a_small_set(tiny_config, tiny_samples, tmp_path):
    cfg = tiny_config.model_copy(
        update={"image_size": 16, "steps": 40, "lr": 1e-2, "hflip_prob": 0.0, "log_every": 10, "batch_size": 4}
    )
    params, opt = _fresh(cfg)
    summary = train(params, opt, tiny_samples, cfg, tmp_path)
    losses = [r.total for r in summary.history]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


@pytest.mark.slow
def test_best_window_improves_over_a_longer_run(tiny_config, tmp_path):
    samples = generate_split(SceneSpec(seed=2, size=16), "train", 16)
    cfg = tiny_config.model_copy(update={"image_size": 16, "steps": 200, "lr": 5e-3, "log_every": 25, "batch_size": 2})
    params, opt = _fresh(cfg)
    summary = train(params, opt, samples, cfg, tmp_path)
    first_window = float(np.mean([r.total for r in summary.history[:25]]))
    assert summary.best_window_loss < 0.8 * first_window
