import numpy as np
import pytest

from app.core.errors import ConfigError
from app.core.rng import Rng
from app.models.schemas import SCORERS, LogitStats, ScoreCalibration
from app.services.data.synthetic import SceneSpec, generate_split
from app.services.evaluation.engine import Evaluator, compute_stats, map_images
from app.services.segmenter.model import ModelDims, ModelParams


@pytest.fixture
def config(tiny_config):
    return tiny_config.model_copy(update={"image_size": 16, "dbscan_min_samples": 4})


@pytest.fixture
def params(config):
    return ModelParams.initialize(ModelDims.from_config(config), Rng(3, "init"))


@pytest.fixture
def open_samples():
    return generate_split(SceneSpec(seed=5, size=16), "val_open", 3)


@pytest.fixture
def closed_samples():
    return generate_split(SceneSpec(seed=5, size=16), "val_closed", 3)


def _results(report):
    data = report.model_dump()
    data.pop("config")
    return data


def test_map_images_keeps_input_order():
    items = list(range(20))
    assert map_images(lambda x: x * x, items, workers=4) == [x * x for x in items]
    assert map_images(lambda x: -x, items, workers=1) == [-x for x in items]


def test_map_images_raises_worker_errors():
    def fail_on_three(x):
        if x == 3:
            raise ConfigError("three")
        return x

    with pytest.raises(ConfigError, match="three"):
        map_images(fail_on_three, list(range(6)), workers=3)


def test_scorer_validation(params, config):
    with pytest.raises(ConfigError):
        Evaluator(params, config, "entropy")
    with pytest.raises(ConfigError, match="stats"):
        Evaluator(params, config, "sml")


def test_threshold_sources(params, config):
    p2f = Evaluator(params, config, "p2f")
    assert (p2f.threshold, p2f.threshold_source) == (-0.6, "config")

    stats = LogitStats(mu=[0.0] * 4, sigma=[1.0] * 4, calibration={"mm": ScoreCalibration(mean=-0.5, std=0.1)})
    mm = Evaluator(params, config, "mm", stats)
    assert mm.threshold == pytest.approx(-0.5 + 2.0 * 0.1)
    assert mm.threshold_source == "calibrated"

    eam = Evaluator(params, config, "eam")
    assert eam.threshold is None and eam.threshold_source == "none"


def test_closed_split_has_no_anomaly_section(params, config, closed_samples):
    report = Evaluator(params, config).evaluate(closed_samples, "val_closed")
    assert report.anomaly is None
    assert report.images == 3
    assert report.config["image_size"] == 16
    assert 0.0 <= report.closed_world.pq <= 1.0
    assert 0.0 <= report.miou <= 1.0
    assert report.metadata["threshold_source"] == "config"


def test_pq_below_target_is_logged(params, config, closed_samples, caplog):
    strict = config.model_copy(update={"pq_target": 1.0})
    report = Evaluator(params, strict).evaluate(closed_samples, "val_closed")
    assert report.closed_world.pq < 1.0
    assert "below the target" in caplog.text


def test_open_split_reports_pixel_and_instance_metrics(params, config, open_samples):
    report = Evaluator(params, config).evaluate(open_samples, "val_open")
    anomaly = report.anomaly
    assert 0.0 <= anomaly["pixel"]["ap"] <= 1.0
    assert 0.0 <= anomaly["pixel"]["fpr_at_95tpr"] <= 1.0
    assert anomaly["threshold"] == -0.6
    assert anomaly["instance"]["num_ground_truth"] >= 3
    assert anomaly["open_world"] is not None
    assert -1.0 <= anomaly["mean_uncertainty_ood"] <= 0.0


def test_baseline_without_calibration_skips_instances(params, config, open_samples):
    report = Evaluator(params, config, "mm").evaluate(open_samples, "val_open")
    assert report.anomaly["instance"] is None
    assert report.anomaly["open_world"] is None
    assert report.anomaly["pixel"]["ap"] >= 0.0


@pytest.mark.parametrize("scorer", ["pred", "sigma", "beta", "pm", "pc"])
def test_uncertainty_variants_evaluate_like_baselines(scorer, params, config, open_samples):
    report = Evaluator(params, config, scorer).evaluate(open_samples, "val_open")
    assert report.scorer == scorer
    assert 0.0 <= report.anomaly["pixel"]["ap"] <= 1.0
    assert report.anomaly["instance"] is None


def test_results_do_not_depend_on_worker_count(params, config, open_samples):
    serial = Evaluator(params, config.model_copy(update={"workers": 1})).evaluate(open_samples, "val_open")
    parallel = Evaluator(params, config.model_copy(update={"workers": 3})).evaluate(open_samples, "val_open")
    assert _results(serial) == _results(parallel)


def test_compute_stats(params, config, closed_samples):
    stats = compute_stats(params, [image for image, _ in closed_samples], config)
    assert stats.images == 3
    assert len(stats.mu) == 4
    assert set(stats.calibration) == set(SCORERS)
    assert all(c.std >= 0.0 for c in stats.calibration.values())

    evaluator = Evaluator(params, config, "sml", stats)
    assert evaluator.threshold_source == "calibrated"
    result = evaluator.process(closed_samples[0][0], cluster=False)
    assert result.scores.shape == (256,)
    assert np.all(np.isfinite(result.scores))


def test_compute_stats_needs_images(params, config):
    with pytest.raises(ConfigError):
        compute_stats(params, [], config)
