import numpy as np
import pytest
from sklearn.cluster import DBSCAN

from app.models.schemas import ClusterConfig
from app.services.anomaly.clustering import (
    NOISE,
    calibrate_threshold,
    dbscan_cosine,
    finalize_instances,
    segment_anomalies,
    select_uncertain,
)
from app.services.anomaly.inference import fuse_uncertainty
from app.services.data.catalog import ANOMALY_CLASS


def _reference_dbscan(points, eps, min_samples):
    """Textbook DBSCAN over a precomputed cosine distance matrix."""
    norms = np.linalg.norm(points, axis=1)
    unit = points / np.where(norms > 0, norms, 1.0)[:, None]
    dist = 1.0 - unit @ unit.T
    zero = norms == 0

    def region(p):
        if zero[p]:
            return []
        return [q for q in range(len(points)) if not zero[q] and dist[p, q] <= eps]

    labels = [None] * len(points)
    cluster = -1
    for p in range(len(points)):
        if labels[p] is not None:
            continue
        neighbors = region(p)
        if len(neighbors) < min_samples:
            labels[p] = NOISE
            continue
        cluster += 1
        labels[p] = cluster
        seeds = [q for q in neighbors if q != p]
        k = 0
        while k < len(seeds):
            q = seeds[k]
            k += 1
            if labels[q] == NOISE:
                labels[q] = cluster
            if labels[q] is not None:
                continue
            labels[q] = cluster
            grown = region(q)
            if len(grown) >= min_samples:
                seeds.extend(grown)
    return np.array(labels)


def _blobs(rng, centers, per_center, spread):
    points = [c + spread * rng.normal(size=(per_center, len(c))) for c in centers]
    return np.concatenate(points)


# =============================================================================
# Threshold calibration
# =============================================================================


@pytest.mark.parametrize(
    "values, k, expected",
    [([-0.9, -0.7], 2.0, -0.6), ([-0.85, -0.65], 3.5, -0.4), ([-0.5, -0.5], 2.0, -0.5)],
)
def test_calibrate_threshold(values, k, expected):
    assert calibrate_threshold(np.array(values), k) == pytest.approx(expected, abs=1e-12)


def test_calibrate_threshold_needs_values():
    with pytest.raises(ValueError):
        calibrate_threshold(np.array([]), 2.0)


def test_select_uncertain_is_strict_and_sorted():
    u = np.array([-0.2, -0.6, -0.1, -0.6000001, -0.59])
    assert select_uncertain(u, -0.6).tolist() == [0, 2, 4]


# =============================================================================
# DBSCAN
# =============================================================================


def test_two_directions_and_an_outlier():
    rng = np.random.default_rng(0)
    a = np.array([1.0, 0.0, 0.0]) + 0.01 * rng.normal(size=(20, 3))
    b = np.array([0.0, 1.0, 0.0]) + 0.01 * rng.normal(size=(20, 3))
    outlier = np.array([[0.0, 0.0, 1.0]])
    labels = dbscan_cosine(np.concatenate([a, b, outlier]), ClusterConfig(eps=0.01, min_samples=5))
    assert set(labels[:20]) == {0}
    assert set(labels[20:40]) == {1}
    assert labels[40] == NOISE


def test_cosine_distance_ignores_magnitude():
    direction = np.array([0.6, 0.8])
    points = np.outer(np.linspace(0.1, 100.0, 10), direction)
    assert set(dbscan_cosine(points, ClusterConfig(eps=1e-9, min_samples=10))) == {0}


def test_zero_vectors_are_noise():
    points = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.001], [0.0, 0.0]])
    labels = dbscan_cosine(points, ClusterConfig(eps=0.01, min_samples=2))
    assert labels.tolist() == [NOISE, 0, 0, NOISE]


def test_empty_input():
    assert dbscan_cosine(np.zeros((0, 4))).size == 0


def test_border_point_joins_the_first_cluster():
    # index 0 lies between the two groups and is not a core point itself
    angles = np.radians([-10.5, 0.0, 3.0, 6.0, 9.0, -30.0, -27.0, -24.0, -21.0])
    points = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    eps = 1.0 - np.cos(np.radians(11.0))
    labels = dbscan_cosine(points, ClusterConfig(eps=eps, min_samples=4))
    assert labels.tolist() == [0, 0, 0, 0, 0, 1, 1, 1, 1]
    assert labels.tolist() == _reference_dbscan(points, eps, 4).tolist()


DBSCAN_GRID = [(eps, m) for eps in (0.02, 0.04, 0.1) for m in (5, 17)]


def _grid_trial(rng, eps, min_samples):
    points = _blobs(rng, rng.normal(size=(3, 4)), 20, rng.uniform(0.05, 0.4))
    points = np.concatenate([points, rng.normal(size=(10, 4))])
    labels = dbscan_cosine(points, ClusterConfig(eps=eps, min_samples=min_samples))
    assert labels.tolist() == _reference_dbscan(points, eps, min_samples).tolist()


@pytest.mark.parametrize("eps, min_samples", DBSCAN_GRID)
def test_matches_textbook_dbscan(eps, min_samples):
    rng = np.random.default_rng(int(eps * 1000) + min_samples)
    for _ in range(40):
        _grid_trial(rng, eps, min_samples)


@pytest.mark.slow
@pytest.mark.parametrize("eps, min_samples", DBSCAN_GRID)
def test_matches_textbook_dbscan_many_trials(eps, min_samples):
    rng = np.random.default_rng(2024 + int(eps * 1000) * 31 + min_samples)
    for _ in range(1000):
        _grid_trial(rng, eps, min_samples)


def test_core_partition_agrees_with_sklearn():
    rng = np.random.default_rng(17)
    points = _blobs(rng, rng.normal(size=(3, 5)), 30, 0.05)
    ours = dbscan_cosine(points, ClusterConfig(eps=0.01, min_samples=6))
    fitted = DBSCAN(eps=0.01, min_samples=6, metric="cosine", algorithm="brute").fit(points)
    core = fitted.core_sample_indices_
    theirs = fitted.labels_
    # same grouping of core points up to relabeling
    pairs = {(int(ours[i]), int(theirs[i])) for i in core}
    assert len(pairs) == len({a for a, _ in pairs}) == len({b for _, b in pairs})
    assert np.array_equal(ours == NOISE, theirs == -1)


# =============================================================================
# Instances
# =============================================================================


def _prediction():
    alpha = np.array([[9.0] * 4 + [1.5] * 4, [1.5] * 4 + [9.0] * 4])
    beta = np.full((2, 8), 1.5)
    logits = np.log(np.array([[0.8, 0.05, 0.05, 0.05, 0.05], [0.05, 0.05, 0.8, 0.05, 0.05]]))
    return fuse_uncertainty(alpha, beta, logits)


def test_finalize_relabels_cluster_pixels():
    prediction = _prediction()
    prediction.uncertainty[[0, 1, 2]] = [-0.1, -0.2, -0.3]
    selected = np.array([0, 1, 2, 6])
    labels = np.array([0, 0, 0, NOISE])
    instances, updated = finalize_instances(labels, selected, prediction)

    assert len(instances.instances) == 1
    inst = instances.instances[0]
    assert inst.pixels.tolist() == [0, 1, 2]
    assert inst.confidence == pytest.approx(0.8, abs=1e-12)
    assert instances.outliers_reassigned == 1
    assert updated.seg_class[[0, 1, 2]].tolist() == [ANOMALY_CLASS] * 3
    # existing thing instance 1 keeps its id; the anomaly gets the next one
    assert updated.seg_instance[[0, 1, 2]].tolist() == [2, 2, 2]
    assert updated.seg_class[6] == prediction.seg_class[6]
    assert updated.seg_instance[6] == prediction.seg_instance[6]
    assert prediction.seg_class[0] == 0


def test_finalize_skips_small_clusters():
    prediction = _prediction()
    instances, updated = finalize_instances(np.array([0, 0, 1]), np.array([1, 2, 5]), prediction, min_samples=2)
    assert [i.pixels.tolist() for i in instances.instances] == [[1, 2]]
    assert instances.outliers_reassigned == 1
    assert updated.seg_class[5] == prediction.seg_class[5]


def test_finalize_rejects_mismatched_inputs():
    with pytest.raises(ValueError):
        finalize_instances(np.array([0]), np.array([1, 2]), _prediction())


def test_segment_anomalies_end_to_end():
    prediction = _prediction()
    prediction.uncertainty[:] = -0.9
    prediction.uncertainty[[1, 2, 3]] = -0.1
    embeddings = np.zeros((2, 8))
    embeddings[0] = 1.0
    instances, updated = segment_anomalies(
        prediction, embeddings, threshold=-0.6, cfg=ClusterConfig(eps=0.01, min_samples=3)
    )
    assert [i.pixels.tolist() for i in instances.instances] == [[1, 2, 3]]
    assert updated.seg_class[[1, 2, 3]].tolist() == [ANOMALY_CLASS] * 3
    assert instances.outliers_reassigned == 0


def test_nothing_above_threshold():
    prediction = _prediction()
    instances, updated = segment_anomalies(prediction, np.ones((2, 8)), threshold=0.5)
    assert instances.instances == []
    assert np.array_equal(updated.seg_class, prediction.seg_class)
