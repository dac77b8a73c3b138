"""
Synthetic Scenes

Deterministic panoptic scenes: a sky/ground split by a horizon plus one to
four shapes. Circles and squares are the in-distribution things; triangles
and crosses are held out and only drawn into `val_open` images.

Every image is keyed by (seed, split, index), so any subset can be regenerated
independently and in any order.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from app.core.rng import Rng
from app.services.data.catalog import CATALOG, OOD_CLASSES, STUFF_CLASSES, VOID

logger = logging.getLogger(__name__)

SPLITS = ("train", "val_closed", "val_open")

# Base RGB per class id
BASE_COLORS = {
    0: (0.45, 0.65, 0.90),
    1: (0.40, 0.32, 0.20),
    2: (0.85, 0.20, 0.20),
    3: (0.20, 0.70, 0.30),
    4: (0.90, 0.80, 0.15),
    5: (0.70, 0.25, 0.80),
}

MIN_INSTANCE_PIXELS = 12
_MAX_ATTEMPTS = 50


@dataclass(frozen=True)
class SceneSpec:
    """Generator parameters; everything else derives from the seed."""
    seed: int = 0
    size: int = 64
    min_things: int = 1
    max_things: int = 4
    noise_sigma: float = 0.05
    color_jitter: float = 0.08
    max_ood: int = 2


@dataclass
class PanopticLabel:
    """Per-pixel ground truth in row-major pixel order.

    Attributes:
        class_map: Class id per pixel (VOID for unlabeled)
        instance_map: Instance id per pixel, 0 for stuff
        height: Image height
        width: Image width
    """
    class_map: np.ndarray
    instance_map: np.ndarray
    height: int
    width: int

    @property
    def catalog(self):
        return CATALOG

    def flipped(self) -> "PanopticLabel":
        return PanopticLabel(
            class_map=hflip_map(self.class_map, self.height, self.width),
            instance_map=hflip_map(self.instance_map, self.height, self.width),
            height=self.height,
            width=self.width,
        )

    def ood_instances(self) -> List[np.ndarray]:
        """Sorted pixel indices of each held-out instance."""
        held_out = np.isin(self.class_map, list(OOD_CLASSES))
        return [
            np.flatnonzero(held_out & (self.instance_map == inst))
            for inst in np.unique(self.instance_map[held_out])
        ]


def hflip_map(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Mirror a [..., H*W] map left to right."""
    lead = values.shape[:-1]
    grid = values.reshape(lead + (height, width))
    return np.ascontiguousarray(grid[..., ::-1]).reshape(lead + (height * width,))


def to_binary_masks(label: PanopticLabel) -> Tuple[np.ndarray, List[int]]:
    """Decompose a label into one mask per stuff class and per thing instance.

    Held-out and void pixels belong to no mask.

    Returns:
        Boolean masks [l_X x H*W] (stuff by class id, then instances by id)
        and the class id of each mask
    """
    masks, classes = [], []
    supervised = (label.class_map != VOID) & ~np.isin(label.class_map, list(OOD_CLASSES))
    for class_id in sorted(STUFF_CLASSES):
        region = supervised & (label.class_map == class_id)
        if region.any():
            masks.append(region)
            classes.append(class_id)
    things = supervised & (label.instance_map > 0)
    for inst in np.unique(label.instance_map[things]):
        region = things & (label.instance_map == inst)
        masks.append(region)
        classes.append(int(label.class_map[region][0]))
    if not masks:
        return np.zeros((0, label.class_map.size), dtype=bool), []
    return np.stack(masks), classes


# =============================================================================
# Shapes
# =============================================================================


def _shape_mask(kind: int, cx: int, cy: int, r: int, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    dx, dy = xs - cx, ys - cy
    if kind == 2:
        region = dx * dx + dy * dy <= r * r
    elif kind == 3:
        region = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    elif kind == 4:
        # apex up, base of width 2r at the bottom
        region = (dy >= -r) & (dy <= r) & (2 * np.abs(dx) <= dy + r)
    else:
        arm = max(1, r // 3)
        region = ((np.abs(dx) <= r) & (np.abs(dy) <= arm)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    return region.reshape(-1)


def _valid_instances(instance_map: np.ndarray, size: int, expected: int) -> bool:
    grid = instance_map.reshape(size, size)
    present = np.unique(grid[grid > 0])
    if present.size != expected:
        return False
    for inst in present:
        _, components = ndimage.label(grid == inst)
        if components != 1 or np.count_nonzero(grid == inst) < MIN_INSTANCE_PIXELS:
            return False
    return True


def _thing_kinds(split: str, spec: SceneSpec, rng: Rng) -> List[int]:
    total = rng.integer(spec.min_things, spec.max_things + 1)
    if split != "val_open":
        return [int(k) for k in rng.integers(2, 4, total)]
    num_ood = rng.integer(1, spec.max_ood + 1)
    num_ind = max(0, total - num_ood)
    kinds = [int(k) for k in rng.integers(2, 4, num_ind)] + [int(k) for k in rng.integers(4, 6, num_ood)]
    # held-out shapes are drawn last so nothing occludes them
    return kinds


def generate_scene(spec: SceneSpec, split: str, index: int) -> Tuple[np.ndarray, PanopticLabel]:
    """Generate image `index` of `split`.

    `val_open` scenes whose held-out shapes could not be placed are redrawn
    from a follow-up stream until one is.

    Returns:
        RGB image [3 x H*W] quantised to multiples of 1/255, and its label
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    retry = 0
    while True:
        rng = Rng(spec.seed, split, index) if retry == 0 else Rng(spec.seed, split, index, "retry", retry)
        image, label = _draw_scene(spec, split, rng)
        if split != "val_open" or ood_mask(label).any():
            return image, label
        retry += 1
        logger.debug(f"{split}[{index}]: no held-out shape placed, redrawing ({retry})")


def _draw_scene(spec: SceneSpec, split: str, rng: Rng) -> Tuple[np.ndarray, PanopticLabel]:
    size = spec.size
    scale = size / 64.0

    horizon = rng.integer(int(round(20 * scale)), int(round(44 * scale)) + 1)
    rows = np.repeat(np.arange(size), size)
    class_map = np.where(rows < horizon, 0, 1).astype(np.int64)
    instance_map = np.zeros(size * size, dtype=np.int64)
    stuff_colors = {0: _jitter(0, spec, rng), 1: _jitter(1, spec, rng)}
    instance_colors = {}

    next_id = 1
    for slot, kind in enumerate(_thing_kinds(split, spec, rng)):
        placement = rng.spawn("place", slot)
        for _ in range(_MAX_ATTEMPTS):
            r = placement.integer(max(2, int(round(4 * scale))), int(round(8 * scale)) + 1)
            cx = placement.integer(r + 1, size - r - 1)
            cy = placement.integer(r + 1, size - r - 1)
            region = _shape_mask(kind, cx, cy, r, size)
            trial = np.where(region, next_id, instance_map)
            if _valid_instances(trial, size, expected=next_id):
                class_map = np.where(region, kind, class_map)
                instance_map = trial
                instance_colors[next_id] = _jitter(kind, spec, rng)
                next_id += 1
                break

    image = _paint(class_map, instance_map, stuff_colors, instance_colors, spec, rng)
    return image, PanopticLabel(class_map=class_map, instance_map=instance_map, height=size, width=size)


def _jitter(class_id: int, spec: SceneSpec, rng: Rng) -> np.ndarray:
    base = np.array(BASE_COLORS[class_id])
    return base + rng.uniform_range(-spec.color_jitter, spec.color_jitter, 3)


def _paint(class_map, instance_map, stuff_colors, instance_colors, spec: SceneSpec, rng: Rng) -> np.ndarray:
    num_pixels = class_map.size
    image = np.empty((3, num_pixels))
    for stuff, color in stuff_colors.items():
        image[:, class_map == stuff] = color[:, None]
    for inst, color in instance_colors.items():
        image[:, instance_map == inst] = color[:, None]
    image += spec.noise_sigma * rng.normal(3 * num_pixels).reshape(3, num_pixels)
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def generate_split(spec: SceneSpec, split: str, count: int, start: int = 0) -> List[Tuple[np.ndarray, PanopticLabel]]:
    """Generate `count` scenes of a split, indices start..start+count-1."""
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")
    logger.info(f"Generating {count} {split} scenes (seed {spec.seed}, size {spec.size})")
    return [generate_scene(spec, split, start + i) for i in range(count)]


def ood_mask(label: PanopticLabel) -> np.ndarray:
    return np.isin(label.class_map, list(OOD_CLASSES))


def find_scene(spec: SceneSpec, split: str, predicate, limit: int = 1000, start: int = 0) -> Optional[int]:
    """Index of the first scene at or after `start` whose label satisfies `predicate`."""
    for index in range(start, start + limit):
        _, label = generate_scene(spec, split, index)
        if predicate(label):
            return index
    return None
