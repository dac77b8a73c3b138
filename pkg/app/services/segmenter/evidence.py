"""
Evidence Head

Turns mask-query features and pixel embeddings into per-pixel, per-mask Beta
concentrations. Evidences come from a product of query rows with embedding
columns, pass through softplus and are shifted by one, so every alpha and beta
is strictly greater than one.
"""

from dataclasses import dataclass
from typing import Union

import numpy as np

from app.core.errors import DimensionError, DomainError
from app.services.autodiff import Tensor
from app.services.autodiff.tensor import lift


@dataclass
class PixelEmbeddings:
    """Per-pixel embedding F_E [E x H*W], row-major pixel order."""
    F_E: Tensor
    height: int
    width: int

    @property
    def dim(self) -> int:
        return self.F_E.shape[0]


@dataclass
class MaskQueries:
    """Per-query evidence rows and class logits (last column is no-object)."""
    F_alpha: Tensor
    F_beta: Tensor
    class_logits: Tensor

    @property
    def num_masks(self) -> int:
        return self.class_logits.shape[0]

    @property
    def num_classes(self) -> int:
        """Number of real classes C (excludes no-object)."""
        return self.class_logits.shape[1] - 1


@dataclass
class EvidenceMaps:
    """Concentrations and derived maps, each [N_M x H*W]."""
    alpha: Tensor
    beta: Tensor
    mask_prob: Tensor
    evi_uncertainty: Tensor


def compute_evidence(queries: MaskQueries, pixels: PixelEmbeddings) -> EvidenceMaps:
    """alpha = softplus(F_alpha . F_E) + 1 and beta likewise.

    Raises:
        DimensionError: If the query rows and embeddings disagree on E
    """
    dim = pixels.dim
    for name, rows in (("F_alpha", queries.F_alpha), ("F_beta", queries.F_beta)):
        if rows.ndim != 2 or rows.shape[1] != dim:
            raise DimensionError(f"{name} has shape {rows.shape}, embeddings have E={dim}")

    alpha = (queries.F_alpha @ pixels.F_E).softplus() + 1.0
    beta = (queries.F_beta @ pixels.F_E).softplus() + 1.0
    return EvidenceMaps(
        alpha=alpha,
        beta=beta,
        mask_prob=expected_mask(alpha, beta),
        evi_uncertainty=-(alpha + beta),
    )


def expected_mask(alpha: Union[Tensor, np.ndarray], beta: Union[Tensor, np.ndarray]) -> Tensor:
    """Expected pixel-to-mask assignment alpha / (alpha + beta)."""
    alpha, beta = lift(alpha), lift(beta)
    if alpha.shape != beta.shape:
        raise DimensionError(f"alpha {alpha.shape} and beta {beta.shape} differ in shape")
    if np.any(~(alpha.data > 0.0)) or np.any(~(beta.data > 0.0)):
        raise DomainError("expected_mask requires alpha > 0 and beta > 0")
    return alpha / (alpha + beta)


def class_probabilities(class_logits: Union[Tensor, np.ndarray]) -> np.ndarray:
    """Row softmax of class logits as a plain array [N_M x (C+1)]."""
    logits = np.asarray(getattr(class_logits, "data", class_logits), dtype=np.float64)
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def mask_logits(mask_prob: Union[Tensor, np.ndarray], class_logits: Union[Tensor, np.ndarray]) -> np.ndarray:
    """Per-pixel class logits L[c, p] = sum_i softmax_i(c) * M[i, p] over real classes.

    Returns:
        Array [C x H*W]
    """
    masks = np.asarray(getattr(mask_prob, "data", mask_prob), dtype=np.float64)
    probs = class_probabilities(class_logits)[:, :-1]
    if probs.shape[0] != masks.shape[0]:
        raise DimensionError(
            f"{probs.shape[0]} class rows do not match {masks.shape[0]} mask rows"
        )
    return probs.T @ masks
