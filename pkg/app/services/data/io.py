"""
Dataset I/O

Netpbm images and the on-disk dataset layout. Images are binary PPM (P6,
8-bit); label maps are binary PGM (P5) with maxval 65535. OpenCV does the
encoding and decoding; this module checks shapes and value ranges. Each
split directory holds `NNNNN.ppm`, `NNNNN_class.pgm`, `NNNNN_instance.pgm` and
`catalog.json`; the dataset root holds `manifest.json`.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import cv2
import numpy as np

from app.core.errors import DataError
from app.models.schemas import ClassInfo, DatasetManifest
from app.services.data.catalog import CATALOG
from app.services.data.synthetic import PanopticLabel

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
Sample = Tuple[np.ndarray, PanopticLabel]

MANIFEST = "manifest.json"
CATALOG_FILE = "catalog.json"


# =============================================================================
# Netpbm
# =============================================================================


def _encode(path: PathLike, extension: str, raster: np.ndarray) -> None:
    ok, buffer = cv2.imencode(extension, raster)
    if not ok:
        raise DataError(f"{path}: could not encode {extension[1:]} image")
    Path(path).write_bytes(buffer.tobytes())


def _decode(path: PathLike) -> np.ndarray:
    blob = _read(path)
    raster = cv2.imdecode(np.frombuffer(blob, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if raster is None:
        raise DataError(f"{path}: could not decode netpbm data (bad header or truncated raster)")
    return raster


def write_ppm(path: PathLike, image: np.ndarray, height: int, width: int) -> None:
    """Write an RGB image [3 x H*W] in [0, 1] as 8-bit P6."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (3, height * width):
        raise DataError(f"image shape {image.shape} does not match {height}x{width}")
    rgb = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).T.reshape(height, width, 3)
    _encode(path, ".ppm", cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR))


def read_ppm(path: PathLike) -> Tuple[np.ndarray, int, int]:
    """Read a P6 file into an RGB image [3 x H*W] in [0, 1]."""
    raster = _decode(path)
    if raster.ndim != 3 or raster.shape[2] != 3 or raster.dtype != np.uint8:
        raise DataError(f"{path}: expected 8-bit RGB, got {raster.dtype} with shape {raster.shape}")
    height, width = raster.shape[:2]
    rgb = cv2.cvtColor(raster, cv2.COLOR_BGR2RGB)
    return rgb.reshape(height * width, 3).T.astype(np.float64) / 255.0, height, width


def write_pgm(path: PathLike, values: np.ndarray, height: int, width: int, maxval: int = 65535) -> None:
    """Write an integer map [H*W] as P5, 16-bit when maxval > 255 and 8-bit otherwise."""
    values = np.asarray(values).reshape(-1)
    if values.size != height * width:
        raise DataError(f"map of {values.size} pixels does not match {height}x{width}")
    if maxval not in (255, 65535):
        raise DataError(f"unsupported maxval {maxval} (use 255 or 65535)")
    if values.min(initial=0) < 0 or values.max(initial=0) > maxval:
        raise DataError(f"map values outside [0, {maxval}]")
    dtype = np.uint16 if maxval > 255 else np.uint8
    _encode(path, ".pgm", values.astype(dtype).reshape(height, width))


def read_pgm(path: PathLike) -> Tuple[np.ndarray, int, int]:
    """Read a P5 file into an int64 map [H*W]."""
    raster = _decode(path)
    if raster.ndim != 2:
        raise DataError(f"{path}: expected a single-channel map, got shape {raster.shape}")
    height, width = raster.shape
    return raster.reshape(-1).astype(np.int64), height, width


def _read(path: PathLike) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"File not found: {path}")
    return path.read_bytes()


# =============================================================================
# Splits and manifest
# =============================================================================


def _stem(index: int) -> str:
    return f"{index:05d}"


def save_split(directory: PathLike, samples: Sequence[Sample]) -> str:
    """Write a split and return the sha256 over its files (sorted by name)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for index, (image, label) in enumerate(samples):
        stem = _stem(index)
        write_ppm(directory / f"{stem}.ppm", image, label.height, label.width)
        write_pgm(directory / f"{stem}_class.pgm", label.class_map, label.height, label.width)
        write_pgm(directory / f"{stem}_instance.pgm", label.instance_map, label.height, label.width)
    catalog = [info.model_dump() for info in CATALOG]
    (directory / CATALOG_FILE).write_text(json.dumps(catalog, indent=2) + "\n", encoding="utf-8")
    return split_checksum(directory)


def split_checksum(directory: PathLike) -> str:
    digest = hashlib.sha256()
    for path in sorted(Path(directory).iterdir()):
        if path.is_file():
            digest.update(path.name.encode("utf-8"))
            digest.update(path.read_bytes())
    return digest.hexdigest()


def load_catalog(directory: PathLike) -> List[ClassInfo]:
    path = Path(directory) / CATALOG_FILE
    if not path.is_file():
        raise DataError(f"Class catalog not found: {path}")
    try:
        return [ClassInfo(**entry) for entry in json.loads(path.read_text(encoding="utf-8"))]
    except (ValueError, TypeError) as e:
        raise DataError(f"{path}: invalid catalog: {e}") from e


def load_split(directory: PathLike, limit: int = 0) -> List[Sample]:
    """Read a split written by `save_split`, in index order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"Split directory not found: {directory}")
    load_catalog(directory)
    images = sorted(directory.glob("*.ppm"))
    if limit:
        images = images[:limit]
    samples = []
    for path in images:
        image, height, width = read_ppm(path)
        class_map, h1, w1 = read_pgm(directory / f"{path.stem}_class.pgm")
        instance_map, h2, w2 = read_pgm(directory / f"{path.stem}_instance.pgm")
        if (h1, w1) != (height, width) or (h2, w2) != (height, width):
            raise DataError(f"{path}: label maps do not match the image size")
        samples.append((image, PanopticLabel(class_map, instance_map, height, width)))
    logger.info(f"Loaded {len(samples)} samples from {directory}")
    return samples


def write_manifest(root: PathLike, manifest: DatasetManifest) -> Path:
    path = Path(root) / MANIFEST
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def read_manifest(root: PathLike) -> DatasetManifest:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise DataError(f"Dataset manifest not found: {path} (run `gen` first)")
    try:
        return DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise DataError(f"{path}: invalid manifest: {e}") from e
