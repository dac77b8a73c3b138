import json
import math

import numpy as np
import pytest

from app.models.schemas import MetricReport, PanopticResult
from app.services.evaluation.report import format_report, write_report


def _report(**overrides):
    fields = dict(
        split="val_closed",
        scorer="p2f",
        images=2,
        config={"seed": 0, "lr": 0.001},
        closed_world=PanopticResult(pq=0.25, sq=0.5, rq=0.5, pq_class_mean=0.2, tp=1, fp=1, fn=1),
        miou=2.0 / 3.0,
    )
    fields.update(overrides)
    return MetricReport(**fields)


def test_metric_floats_use_six_decimals_and_ints_stay_ints():
    text = format_report(_report())
    assert '"miou": 0.666667' in text
    assert '"tp": 1' in text
    assert json.loads(text)["closed_world"]["pq"] == 0.25


def test_config_echo_is_lossless():
    config = {"seed": 0, "lr": 0.001, "adam_eps": 1e-08, "target_eps": 0.001, "k_sigma": 2.0, "flag": True}
    text = format_report(_report(config=config))
    assert '"adam_eps": 1e-08' in text
    assert '"lr": 0.001,' in text
    assert json.loads(text)["config"] == config


def test_keys_follow_model_field_order():
    keys = list(json.loads(format_report(_report())))
    assert keys == ["split", "scorer", "images", "config", "metadata", "closed_world", "miou", "anomaly"]


def test_non_finite_values_become_null():
    text = format_report({"a": math.nan, "b": [math.inf, 1.5], "c": None, "d": True})
    assert json.loads(text) == {"a": None, "b": [None, 1.5], "c": None, "d": True}


def test_numpy_scalars_are_unwrapped():
    assert json.loads(format_report({"x": np.float64(0.5), "n": np.int64(3)})) == {"x": 0.5, "n": 3}


def test_unknown_values_are_rejected():
    with pytest.raises(TypeError):
        format_report({"x": object()})


def test_identical_reports_give_identical_bytes(tmp_path):
    first = write_report(_report(), tmp_path / "a" / "r.json")
    second = write_report(_report(), tmp_path / "b" / "r.json")
    assert first.read_bytes() == second.read_bytes()
    assert first.read_text(encoding="utf-8").endswith("}\n")


def test_unknown_scorer_is_rejected():
    with pytest.raises(ValueError):
        _report(scorer="entropy")
