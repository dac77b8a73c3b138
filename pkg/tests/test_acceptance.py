"""End-to-end runs of the command line on the default synthetic world.

Every test here trains or evaluates at full scale and is marked slow.
"""

import json

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from app.cli import main
from app.services.data.io import write_ppm
from app.services.data.synthetic import SceneSpec, find_scene, generate_scene

pytestmark = pytest.mark.slow

CLUSTER_SCENES = 10
MIN_GAP = 5.0


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    data, run = root / "data", root / "run"
    assert main(["gen", "--out", str(data), "--seed", "0"]) == 0
    assert main(["train", "--data", str(data), "--out", str(run)]) == 0
    model = str(run / "model.p2fm")
    stats = root / "stats.json"
    assert main(["stats", "--model", model, "--data", str(data), "--out", str(stats)]) == 0
    return root, model, stats


def _eval(root, model, split, scorer, name, stats=None):
    out = root / f"{name}.json"
    args = ["eval", "--model", model, "--data", str(root / "data"), "--split", split, "--scorer", scorer, "--out", str(out)]
    if stats is not None:
        args += ["--stats", str(stats)]
    assert main(args) == 0
    return json.loads(out.read_text(encoding="utf-8"))


def test_default_training_reaches_closed_world_pq(trained):
    root, model, _ = trained
    report = _eval(root, model, "val_closed", "p2f", "closed")
    closed = report["closed_world"]
    assert closed["pq"] >= 0.5
    assert closed["pq"] == pytest.approx(closed["sq"] * closed["rq"], abs=1e-5)


def test_uncertainty_separates_held_out_shapes(trained):
    root, model, stats = trained
    fused = _eval(root, model, "val_open", "p2f", "open_p2f", stats)["anomaly"]
    max_mask = _eval(root, model, "val_open", "mm", "open_mm", stats)["anomaly"]

    assert fused["mean_uncertainty_ood"] - fused["mean_uncertainty_ind"] >= 0.1
    assert fused["pixel"]["ap"] >= 3.0 * fused["pixel"]["prevalence"]
    assert fused["pixel"]["fpr_at_95tpr"] <= max_mask["pixel"]["fpr_at_95tpr"]


def _well_separated(label):
    instances = label.ood_instances()
    if len(instances) < 2:
        return False
    coords = [np.stack(np.divmod(pixels, label.width), axis=1) for pixels in instances]
    return all(
        cdist(coords[i], coords[j]).min() >= MIN_GAP
        for i in range(len(coords))
        for j in range(i + 1, len(coords))
    )


def _iou(a, b):
    inter = np.intersect1d(a, b).size
    return inter / (a.size + b.size - inter)


def test_clustering_recovers_separate_anomalies(trained, tmp_path):
    _, model, stats = trained
    spec = SceneSpec(seed=0, size=64)
    passed, start = 0, 1000
    for k in range(CLUSTER_SCENES):
        index = find_scene(spec, "val_open", _well_separated, start=start)
        assert index is not None
        start = index + 1
        image, label = generate_scene(spec, "val_open", index)
        write_ppm(tmp_path / f"{k}.ppm", image, label.height, label.width)
        out = tmp_path / f"out{k}"
        code = main([
            "infer", "--model", model, "--image", str(tmp_path / f"{k}.ppm"),
            "--out", str(out), "--cluster", "--stats", str(stats),
        ])
        assert code == 0
        found = [np.asarray(inst["pixels"]) for inst in json.loads((out / "instances.json").read_text())["instances"]]
        matched = [
            truth for truth in label.ood_instances()
            if any(_iou(pixels, truth) > 0.5 for pixels in found)
        ]
        if len(found) >= 2 and len(matched) >= 2:
            passed += 1
    assert passed >= 8


def test_repeated_runs_give_identical_bytes(trained, tmp_path):
    root, model, stats = trained
    data = str(root / "data")
    for run in ("a", "b"):
        assert main(["train", "--data", data, "--out", str(tmp_path / run), "--steps", "50"]) == 0
    assert (tmp_path / "a" / "model.p2fm").read_bytes() == (tmp_path / "b" / "model.p2fm").read_bytes()
    assert (tmp_path / "a" / "best.p2fm").read_bytes() == (tmp_path / "b" / "best.p2fm").read_bytes()

    reports = []
    for name in ("first", "second"):
        out = tmp_path / f"{name}.json"
        args = ["eval", "--model", model, "--data", data, "--split", "val_open", "--stats", str(stats), "--out", str(out)]
        assert main(args) == 0
        reports.append(out.read_bytes())
    assert reports[0] == reports[1]
