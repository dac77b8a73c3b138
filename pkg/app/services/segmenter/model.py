"""
Toy Segmenter

A small mask-based segmenter: a two-level convolutional stem followed by a
linear projection produces pixel embeddings F_E, a learned query bank attends
once over those embeddings, and a two-layer MLP turns each query into an alpha
row, a beta row and class logits.

All tensors are named; the names are the checkpoint record names.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, Tuple, Union

import numpy as np

from app.core.config import RunConfig
from app.core.errors import DimensionError, NumericError
from app.core.rng import Rng
from app.services.autodiff import Tensor, avg_pool2, conv2d, upsample2
from app.services.segmenter.evidence import MaskQueries, PixelEmbeddings

logger = logging.getLogger(__name__)

IN_CHANNELS = 3


@dataclass(frozen=True)
class ModelDims:
    """Shape-defining sizes of the segmenter."""
    image_size: int = 64
    embed_dim: int = 16
    num_queries: int = 8
    query_dim: int = 32
    hidden_dim: int = 64
    num_classes: int = 4

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "ModelDims":
        return cls(
            image_size=cfg.image_size,
            embed_dim=cfg.embed_dim,
            num_queries=cfg.num_queries,
            query_dim=cfg.query_dim,
            hidden_dim=cfg.hidden_dim,
            num_classes=cfg.num_classes,
        )

    @property
    def head_dim(self) -> int:
        """MLP output width: alpha row, beta row, C+1 class logits."""
        return 2 * self.embed_dim + self.num_classes + 1

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        e, q, h = self.embed_dim, self.query_dim, self.hidden_dim
        return OrderedDict([
            ("stem.conv1.weight", (e, IN_CHANNELS * 9)),
            ("stem.conv1.bias", (e, 1)),
            ("stem.conv2.weight", (e, e * 9)),
            ("stem.conv2.bias", (e, 1)),
            ("stem.proj.weight", (e, e)),
            ("stem.proj.bias", (e, 1)),
            ("query_bank", (self.num_queries, q)),
            ("decoder.key.weight", (q, e)),
            ("decoder.value.weight", (e, q)),
            ("query_mlp.fc1.weight", (q, h)),
            ("query_mlp.fc1.bias", (1, h)),
            ("query_mlp.fc2.weight", (h, self.head_dim)),
            ("query_mlp.fc2.bias", (1, self.head_dim)),
        ])


def _fan_in(name: str, shape: Tuple[int, ...]) -> int:
    # stem kernels are [out x in*9] or [out x in]; dense weights are [in x out]
    return shape[1] if name.startswith("stem.") else shape[0]


class ModelParams:
    """Named parameter tensors of one segmenter, in a fixed order."""

    def __init__(self, dims: ModelDims, tensors: "OrderedDict[str, Tensor]"):
        expected = dims.shapes()
        if list(tensors) != list(expected):
            raise DimensionError(
                f"parameter names {list(tensors)} do not match {list(expected)}"
            )
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {tensors[name].shape}")
            tensors[name].requires_grad = True
            tensors[name].name = name
        self.dims = dims
        self.tensors = tensors

    @classmethod
    def initialize(cls, dims: ModelDims, rng: Rng) -> "ModelParams":
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases, N(0, 1/Q) query bank."""
        tensors = OrderedDict()
        for name, shape in dims.shapes().items():
            stream = rng.spawn(name)
            count = int(np.prod(shape))
            if name.endswith(".bias"):
                values = np.zeros(count)
            elif name == "query_bank":
                values = stream.normal(count) / math.sqrt(dims.query_dim)
            else:
                bound = 1.0 / math.sqrt(_fan_in(name, shape))
                values = stream.uniform_range(-bound, bound, count)
            tensors[name] = Tensor(values.reshape(shape))
        logger.info(f"Initialized segmenter with {sum(t.size for t in tensors.values())} parameters")
        return cls(dims, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(
            (name, np.zeros_like(t.data) if t.grad is None else t.grad)
            for name, t in self.tensors.items()
        )

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.dims, OrderedDict((n, Tensor(t.data.copy())) for n, t in self.tensors.items())
        )

    def assert_finite(self) -> None:
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t.data)):
                raise NumericError(f"parameter {name} became non-finite")


def forward(params: ModelParams, image: Union[Tensor, np.ndarray]) -> Tuple[PixelEmbeddings, MaskQueries]:
    """Run the segmenter on one image.

    Args:
        params: Model parameters
        image: RGB image [3 x H*W] with values in [0, 1]

    Returns:
        Pixel embeddings and mask queries

    Raises:
        DimensionError: If the image does not match the configured size
    """
    dims = params.dims
    size = dims.image_size
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if data.shape != (IN_CHANNELS, size * size):
        raise DimensionError(
            f"image has shape {data.shape}, model expects ({IN_CHANNELS}, {size * size})"
        )
    x = Tensor(data - 0.5)
    p = params.tensors

    h1 = conv2d(x, p["stem.conv1.weight"], p["stem.conv1.bias"], size, size).relu()
    half = size // 2
    pooled = avg_pool2(h1, size, size)
    h2 = conv2d(pooled, p["stem.conv2.weight"], p["stem.conv2.bias"], half, half).relu()
    fused = h1 + upsample2(h2, half, half)
    # linear so F_E can take either sign
    embeddings = p["stem.proj.weight"] @ fused + p["stem.proj.bias"]

    queries = p["query_bank"]
    scores = (queries @ p["decoder.key.weight"]) @ embeddings
    attention = (scores * (1.0 / math.sqrt(dims.embed_dim))).softmax(axis=1)
    context = (attention @ embeddings.T) @ p["decoder.value.weight"]
    hidden = ((queries + context) @ p["query_mlp.fc1.weight"] + p["query_mlp.fc1.bias"]).relu()
    head = hidden @ p["query_mlp.fc2.weight"] + p["query_mlp.fc2.bias"]

    e = dims.embed_dim
    return (
        PixelEmbeddings(F_E=embeddings, height=size, width=size),
        MaskQueries(
            F_alpha=head.gather(np.arange(e), axis=1),
            F_beta=head.gather(np.arange(e, 2 * e), axis=1),
            class_logits=head.gather(np.arange(2 * e, dims.head_dim), axis=1),
        ),
    )
