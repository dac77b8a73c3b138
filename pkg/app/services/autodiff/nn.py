"""
Image Layers

Differentiable layers over channel-major images stored as [C x H*W] tensors
(pixels in row-major order): a 3x3 same-padding convolution built on im2col,
2x2 average pooling and 2x nearest-neighbour upsampling.
"""

from functools import lru_cache

import numpy as np

from app.core.errors import DimensionError
from app.services.autodiff.tensor import ArrayLike, Tensor, apply_op, lift


def _check_image(x: Tensor, height: int, width: int, op: str) -> int:
    if x.ndim != 2 or x.shape[1] != height * width:
        raise DimensionError(f"{op}: expected [C x {height * width}] image, got {x.shape}")
    return x.shape[0]


@lru_cache(maxsize=32)
def _im2col_index(channels: int, height: int, width: int) -> np.ndarray:
    """Rows are (channel, dy, dx) taps into the zero-padded flat image."""
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    ys, xs = ys.reshape(-1), xs.reshape(-1)
    plane = (height + 2) * (width + 2)
    rows = [
        c * plane + (ys + dy) * (width + 2) + (xs + dx)
        for c in range(channels)
        for dy in range(3)
        for dx in range(3)
    ]
    index = np.stack(rows)
    index.setflags(write=False)
    return index


def im2col3x3(x: ArrayLike, height: int, width: int) -> Tensor:
    """Unfold 3x3 neighbourhoods (zero padding 1) into [C*9 x H*W] columns."""
    x = lift(x)
    channels = _check_image(x, height, width, "im2col")
    padded = np.pad(x.data.reshape(channels, height, width), ((0, 0), (1, 1), (1, 1)))
    index = _im2col_index(channels, height, width)
    size = padded.size

    def backward(g):
        flat = np.bincount(index.reshape(-1), weights=g.reshape(-1), minlength=size)
        inner = flat.reshape(channels, height + 2, width + 2)[:, 1:-1, 1:-1]
        return (inner.reshape(channels, height * width),)

    return apply_op("im2col", padded.reshape(-1)[index], (x,), backward)


def conv2d(x: ArrayLike, weight: Tensor, bias: Tensor, height: int, width: int) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1.

    Args:
        x: Input image [C_in x H*W]
        weight: Kernel [C_out x C_in*9]
        bias: Bias [C_out x 1]
        height: Image height
        width: Image width

    Returns:
        Output image [C_out x H*W]
    """
    cols = im2col3x3(x, height, width)
    if weight.shape[1] != cols.shape[0]:
        raise DimensionError(
            f"conv2d: kernel {weight.shape} does not fit {cols.shape[0] // 9} input channels"
        )
    return weight @ cols + bias


def avg_pool2(x: ArrayLike, height: int, width: int) -> Tensor:
    """2x2 average pooling with stride 2; height and width must be even."""
    x = lift(x)
    channels = _check_image(x, height, width, "avg_pool2")
    if height % 2 or width % 2:
        raise DimensionError(f"avg_pool2: odd spatial size {height}x{width}")
    h, w = height // 2, width // 2
    out = x.data.reshape(channels, h, 2, w, 2).mean(axis=(2, 4)).reshape(channels, h * w)

    def backward(g):
        spread = np.broadcast_to(g.reshape(channels, h, 1, w, 1) * 0.25, (channels, h, 2, w, 2))
        return (spread.reshape(channels, height * width),)

    return apply_op("avg_pool2", out, (x,), backward)


def upsample2(x: ArrayLike, height: int, width: int) -> Tensor:
    """2x nearest-neighbour upsampling of a [C x height*width] image."""
    x = lift(x)
    channels = _check_image(x, height, width, "upsample2")
    grid = x.data.reshape(channels, height, width)
    out = grid.repeat(2, axis=1).repeat(2, axis=2).reshape(channels, 4 * height * width)

    def backward(g):
        folded = g.reshape(channels, height, 2, width, 2).sum(axis=(2, 4))
        return (folded.reshape(channels, height * width),)

    return apply_op("upsample2", out, (x,), backward)
