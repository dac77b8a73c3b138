import numpy as np
import pytest
from scipy import ndimage

from app.services.data.catalog import OOD_CLASSES, STUFF_CLASSES, THING_CLASSES
from app.services.data.synthetic import (
    MIN_INSTANCE_PIXELS,
    SPLITS,
    SceneSpec,
    find_scene,
    generate_scene,
    generate_split,
    hflip_map,
    ood_mask,
    to_binary_masks,
)

SPEC = SceneSpec(seed=4, size=32)


def test_scenes_are_reproducible():
    first_image, first_label = generate_scene(SPEC, "train", 3)
    second_image, second_label = generate_scene(SPEC, "train", 3)
    assert np.array_equal(first_image, second_image)
    assert np.array_equal(first_label.class_map, second_label.class_map)
    other_image, _ = generate_scene(SPEC, "train", 4)
    assert not np.array_equal(first_image, other_image)


def test_splits_draw_from_separate_streams():
    train_image, _ = generate_scene(SPEC, "train", 0)
    closed_image, _ = generate_scene(SPEC, "val_closed", 0)
    assert not np.array_equal(train_image, closed_image)


def test_images_are_quantized_rgb():
    image, label = generate_scene(SPEC, "val_open", 1)
    assert image.shape == (3, 32 * 32)
    assert image.min() >= 0.0 and image.max() <= 1.0
    assert np.allclose(image * 255.0, np.round(image * 255.0), atol=1e-9)
    assert (label.height, label.width) == (32, 32)


@pytest.mark.parametrize("split", SPLITS)
def test_label_invariants(split):
    for index in range(8):
        _, label = generate_scene(SPEC, split, index)
        grid_class = label.class_map.reshape(32, 32)
        grid_inst = label.instance_map.reshape(32, 32)
        stuff = np.isin(label.class_map, list(STUFF_CLASSES))
        assert np.all(label.instance_map[stuff] == 0)
        for inst in np.unique(grid_inst[grid_inst > 0]):
            region = grid_inst == inst
            classes = np.unique(grid_class[region])
            assert classes.size == 1
            assert int(classes[0]) in THING_CLASSES | OOD_CLASSES
            assert ndimage.label(region)[1] == 1
            assert region.sum() >= MIN_INSTANCE_PIXELS


def test_held_out_shapes_only_in_the_open_split():
    for index in range(10):
        assert not ood_mask(generate_scene(SPEC, "train", index)[1]).any()
        assert not ood_mask(generate_scene(SPEC, "val_closed", index)[1]).any()
        assert ood_mask(generate_scene(SPEC, "val_open", index)[1]).any()


def test_small_images_still_place_shapes():
    _, label = generate_scene(SceneSpec(seed=0, size=16), "val_open", 0)
    assert label.ood_instances()
    assert all(np.all(np.diff(pixels) > 0) for pixels in label.ood_instances())


def test_binary_masks_cover_supervised_pixels_once():
    _, label = generate_scene(SPEC, "val_open", 2)
    masks, classes = to_binary_masks(label)
    assert masks.shape[1] == 32 * 32
    assert len(classes) == masks.shape[0]
    assert np.all(masks.sum(axis=0) <= 1)
    covered = masks.any(axis=0)
    assert np.array_equal(covered, ~ood_mask(label))
    stuff_count = sum(c in STUFF_CLASSES for c in classes)
    assert all(c in STUFF_CLASSES for c in classes[:stuff_count])
    assert not set(classes) & OOD_CLASSES


def test_hflip():
    values = np.arange(6).reshape(1, 6)
    assert hflip_map(values, 2, 3).tolist() == [[2, 1, 0, 5, 4, 3]]
    _, label = generate_scene(SPEC, "train", 0)
    twice = label.flipped().flipped()
    assert np.array_equal(twice.class_map, label.class_map)
    assert np.array_equal(twice.instance_map, label.instance_map)


def test_generate_split_checks_arguments():
    with pytest.raises(ValueError):
        generate_split(SPEC, "train", 0)
    with pytest.raises(ValueError):
        generate_scene(SPEC, "test", 0)
    samples = generate_split(SPEC, "val_closed", 2, start=5)
    assert np.array_equal(samples[0][0], generate_scene(SPEC, "val_closed", 5)[0])


def test_find_scene():
    index = find_scene(SPEC, "val_open", lambda label: len(label.ood_instances()) >= 1)
    assert index == 0
    assert find_scene(SPEC, "train", lambda label: False, limit=3) is None
