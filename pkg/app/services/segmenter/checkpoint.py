"""
Checkpoints

Binary model files: magic "P2FM", a u16 format version, then one record per
tensor ([u16 name length][utf-8 name][u8 rank][u32 extents][f64 payload], all
little-endian) and a trailing CRC32 over everything before it. The model's
image size is stored as a one-element `meta.image_size` record.
"""

import logging
import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Union

import numpy as np

from app.core.errors import CheckpointIntegrityError, CheckpointParseError, DataError
from app.services.autodiff import Tensor
from app.services.segmenter.model import ModelDims, ModelParams

logger = logging.getLogger(__name__)

MAGIC = b"P2FM"
FORMAT_VERSION = 1
META_IMAGE_SIZE = "meta.image_size"


def _record(name: str, values: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    header = struct.pack("<H", len(encoded)) + encoded + struct.pack("<B", values.ndim)
    header += struct.pack(f"<{values.ndim}I", *values.shape)
    return header + np.ascontiguousarray(values, dtype="<f8").tobytes()


def encode_checkpoint(params: ModelParams) -> bytes:
    body = bytearray(MAGIC + struct.pack("<H", FORMAT_VERSION))
    body += _record(META_IMAGE_SIZE, np.array([float(params.dims.image_size)]))
    for name, tensor in params.items():
        body += _record(name, tensor.data)
    return bytes(body) + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, blob: bytes, end: int):
        self.blob = blob
        self.end = end
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > self.end:
            raise CheckpointParseError(f"truncated while reading {what}", self.offset)
        chunk = self.blob[self.offset:self.offset + count]
        self.offset += count
        return chunk


def decode_checkpoint(blob: bytes) -> ModelParams:
    """Parse checkpoint bytes into parameters.

    Raises:
        CheckpointParseError: On structural problems, with the byte offset
        CheckpointIntegrityError: If the CRC does not match
        DataError: If the records do not form a valid segmenter
    """
    if len(blob) < len(MAGIC) + 2 + 4:
        raise CheckpointParseError("file too short for a checkpoint", len(blob))
    reader = _Reader(blob, len(blob) - 4)
    if reader.take(4, "magic") != MAGIC:
        raise CheckpointParseError("bad magic (not a P2FM checkpoint)", 0)
    (version,) = struct.unpack("<H", reader.take(2, "version"))
    if version != FORMAT_VERSION:
        raise CheckpointParseError(f"unsupported format version {version}", 4)

    records = OrderedDict()
    while reader.offset < reader.end:
        start = reader.offset
        (name_len,) = struct.unpack("<H", reader.take(2, "name length"))
        try:
            name = reader.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointParseError("record name is not valid utf-8", start + 2) from None
        if name in records:
            raise CheckpointParseError(f"duplicate record {name!r}", start)
        (rank,) = struct.unpack("<B", reader.take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank, "extents"))
        count = int(np.prod(shape, dtype=np.int64))
        payload = reader.take(8 * count, f"payload of {name!r}")
        records[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)

    (stored,) = struct.unpack("<I", blob[-4:])
    actual = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise CheckpointIntegrityError(f"CRC mismatch: stored {stored:08x}, computed {actual:08x}")

    return _params_from_records(records)


def _params_from_records(records: "OrderedDict[str, np.ndarray]") -> ModelParams:
    try:
        image_size = int(records.pop(META_IMAGE_SIZE)[0])
        embed_dim = records["stem.conv1.weight"].shape[0]
        num_queries, query_dim = records["query_bank"].shape
        hidden_dim = records["query_mlp.fc1.weight"].shape[1]
        head_dim = records["query_mlp.fc2.weight"].shape[1]
    except (KeyError, IndexError, ValueError) as e:
        raise DataError(f"checkpoint is missing a required record: {e}") from e

    dims = ModelDims(
        image_size=image_size,
        embed_dim=embed_dim,
        num_queries=num_queries,
        query_dim=query_dim,
        hidden_dim=hidden_dim,
        num_classes=head_dim - 2 * embed_dim - 1,
    )
    try:
        return ModelParams(dims, OrderedDict((n, Tensor(v)) for n, v in records.items()))
    except ValueError as e:
        raise DataError(f"checkpoint records do not form a segmenter: {e}") from e


def save_model(params: ModelParams, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(params))
    logger.info(f"Saved checkpoint to {path}")


def load_model(path: Union[str, Path]) -> ModelParams:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Checkpoint not found: {path}")
    params = decode_checkpoint(path.read_bytes())
    logger.info(f"Loaded checkpoint {path} (image size {params.dims.image_size})")
    return params
