"""
AdamW

Adam moments with decoupled weight decay and global-norm gradient clipping.
Parameters are replaced with fresh arrays on every update, never mutated in
place.
"""

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from app.core.config import RunConfig
from app.core.errors import NumericError
from app.services.segmenter.model import ModelParams


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float
    grad_clip: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=OrderedDict)

    @classmethod
    def create(cls, params: ModelParams, cfg: RunConfig) -> "OptimizerState":
        return cls(
            lr=cfg.lr,
            weight_decay=cfg.weight_decay,
            grad_clip=cfg.grad_clip,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.adam_eps,
            exp_avg=OrderedDict((n, np.zeros_like(t.data)) for n, t in params.items()),
            exp_avg_sq=OrderedDict((n, np.zeros_like(t.data)) for n, t in params.items()),
        )


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """Scale all gradients by max_norm / norm when the global L2 norm exceeds max_norm.

    Returns:
        The (possibly scaled) gradients and the pre-clipping norm
    """
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not math.isfinite(norm):
        raise NumericError("gradient norm is not finite")
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return OrderedDict((n, g * scale) for n, g in grads.items()), norm


def adamw_step(params: ModelParams, grads: Dict[str, np.ndarray], state: OptimizerState) -> float:
    """Apply one update in place on `params` and `state`.

    Returns:
        The global gradient norm before clipping
    """
    grads, norm = clip_grad_norm(grads, state.grad_clip)
    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step

    for name, tensor in params.items():
        g = grads[name]
        m = state.beta1 * state.exp_avg[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.exp_avg_sq[name] + (1.0 - state.beta2) * g * g
        state.exp_avg[name], state.exp_avg_sq[name] = m, v

        decayed = tensor.data * (1.0 - state.lr * state.weight_decay)
        update = (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        tensor.data = decayed - state.lr * update
    return norm
