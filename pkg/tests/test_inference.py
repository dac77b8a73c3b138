import math

import numpy as np
import pytest

from app.models.schemas import FilterConfig
from app.services.anomaly.inference import filter_masks, fuse_uncertainty, predict, run_model
from app.services.segmenter.evidence import class_probabilities
from tests.conftest import make_scene


def _logits(*rows):
    return np.log(np.array(rows, dtype=np.float64))


def test_single_confident_mask():
    alpha = np.array([[9.0]])
    beta = np.array([[1.0]])
    prediction = fuse_uncertainty(alpha, beta, _logits([0.8, 0.1, 0.05, 0.05]))
    assert prediction.uncertainty[0] == pytest.approx(-0.72, abs=1e-12)
    assert prediction.seg_class[0] == 0
    assert prediction.low_confidence.size == 0


def test_winner_is_the_mask_with_most_positive_evidence():
    alpha = np.array([[2.0, 8.0, 5.0], [6.0, 3.0, 5.0]])
    beta = np.full((2, 3), 2.0)
    logits = _logits([0.1, 0.1, 0.7, 0.1, 1e-12], [0.1, 0.1, 0.1, 0.6, 0.1])
    prediction = fuse_uncertainty(alpha, beta, logits)
    # ties go to the lower index
    assert prediction.winner.tolist() == [1, 0, 0]
    assert prediction.seg_class.tolist() == [3, 2, 2]
    assert prediction.uncertainty[1] == pytest.approx(-0.7 * 0.8, abs=1e-9)


def test_uncertainty_stays_in_range():
    rng = np.random.default_rng(21)
    for _ in range(50):
        alpha = rng.uniform(1.0, 40.0, size=(4, 30))
        beta = rng.uniform(1.0, 40.0, size=(4, 30))
        logits = rng.normal(scale=3.0, size=(4, 5))
        u = fuse_uncertainty(alpha, beta, logits).uncertainty
        assert np.all(u >= -1.0) and np.all(u <= 0.0)


def test_low_confidence_pixels_are_reported():
    alpha = np.array([[1.5, 4.0]])
    beta = np.array([[3.0, 1.0]])
    prediction = fuse_uncertainty(alpha, beta, _logits([0.9, 0.05, 0.05]))
    assert prediction.low_confidence.tolist() == [0]


def test_thing_masks_become_numbered_instances():
    alpha = np.array([[9.0, 9.0, 1.5, 1.5], [1.5, 1.5, 9.0, 1.5], [1.5, 1.5, 1.5, 9.0]])
    beta = np.full((3, 4), 1.5)
    logits = _logits(
        [0.05, 0.05, 0.8, 0.05, 0.05],
        [0.8, 0.05, 0.05, 0.05, 0.05],
        [0.05, 0.05, 0.05, 0.8, 0.05],
    )
    prediction = fuse_uncertainty(alpha, beta, logits)
    assert prediction.seg_instance.tolist() == [1, 1, 0, 2]
    assert prediction.instances == {1: (0, 2), 2: (2, 3)}


def test_filter_rejects_no_object_and_weak_masks():
    logits = _logits([0.1, 0.1, 0.1, 0.7], [0.45, 0.3, 0.15, 0.1], [0.6, 0.2, 0.1, 0.1])
    assert filter_masks(logits, FilterConfig(object_mask_threshold=0.5)) == frozenset({0, 1})


def test_filter_keeps_probability_exactly_at_threshold():
    logits = _logits([0.6, 0.3, 0.1])
    exact = float(class_probabilities(logits).max())
    assert filter_masks(logits, FilterConfig(object_mask_threshold=exact)) == frozenset()


def test_filtered_masks_never_win():
    alpha = np.array([[20.0, 20.0], [2.0, 3.0]])
    beta = np.full((2, 2), 2.0)
    logits = _logits([0.8, 0.1, 0.1], [0.1, 0.8, 0.1])
    prediction = fuse_uncertainty(alpha, beta, logits, filtered={0})
    assert prediction.winner.tolist() == [1, 1]
    assert not prediction.fallback


def test_all_filtered_falls_back_to_every_mask(caplog):
    alpha = np.array([[4.0], [2.0]])
    beta = np.full((2, 1), 2.0)
    logits = _logits([0.8, 0.1, 0.1], [0.1, 0.8, 0.1])
    prediction = fuse_uncertainty(alpha, beta, logits, filtered={0, 1})
    assert prediction.fallback
    assert prediction.winner.tolist() == [0]
    assert "filtered out" in caplog.text


def test_prediction_copy_is_independent():
    prediction = fuse_uncertainty(np.array([[3.0]]), np.array([[1.0]]), _logits([0.5, 0.5]))
    clone = prediction.copy()
    clone.seg_class[0] = 9
    assert prediction.seg_class[0] != 9


def test_run_model_and_predict(tiny_params, tiny_config):
    image, _ = make_scene()
    outputs = run_model(tiny_params, image)
    assert outputs.alpha.shape == (3, 64)
    assert outputs.logits().shape == (4, 64)
    assert outputs.num_classes == 4
    assert not any(t.grad is not None for _, t in tiny_params.items())

    prediction = predict(outputs, tiny_config.filter_config(), mask_filtering=False)
    assert prediction.filtered == frozenset()
    assert prediction.seg_class.shape == (64,)
    assert np.all(prediction.uncertainty <= 0.0)
    assert math.isfinite(float(prediction.uncertainty.sum()))
