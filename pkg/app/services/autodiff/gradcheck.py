"""
Gradient Check

Compares tape gradients against central finite differences.
"""

import logging
from typing import Callable, Iterable, Optional

import numpy as np

from app.core.errors import DimensionError, EvaluationError
from app.services.autodiff.tensor import Graph, Tensor, no_grad

logger = logging.getLogger(__name__)


def _scalar(y: Tensor, where: str) -> float:
    if y.size != 1:
        raise DimensionError(f"grad_check: function must return a scalar, got shape {y.shape}")
    value = float(y.data.reshape(-1)[0])
    if not np.isfinite(value):
        raise EvaluationError(f"grad_check: non-finite function value {where}")
    return value


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    coords: Optional[Iterable[int]] = None,
) -> float:
    """Largest relative disagreement between tape and finite-difference gradients.

    The error at coordinate i is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).

    Args:
        f: Scalar-valued function of `x`
        x: Point to check at; its data is perturbed in place and restored
        h: Finite-difference step
        coords: Flat coordinates to check (all of them by default)

    Returns:
        The maximum relative error over the checked coordinates

    Raises:
        EvaluationError: If f is non-finite at x or at a perturbed point
    """
    x.requires_grad = True
    x.grad = None
    with Graph():
        y = f(x)
        _scalar(y, "at x")
        if y.requires_grad:
            y.backward()
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()

    flat = x.data.reshape(-1)
    coords = range(x.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in coords:
            original = flat[i]
            flat[i] = original + h
            upper = _scalar(f(x), f"at +h on coordinate {i}")
            flat[i] = original - h
            lower = _scalar(f(x), f"at -h on coordinate {i}")
            flat[i] = original
            numeric = (upper - lower) / (2.0 * h)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]), abs(numeric))
            worst = max(worst, err)

    logger.debug(f"grad_check: max relative error {worst:.3e}")
    return worst
