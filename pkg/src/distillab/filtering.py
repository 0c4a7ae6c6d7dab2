"""Dynamic screening of sampled negatives that the teacher scores above the
labeled positive. Recomputed from scratch every step, so the effective
threshold moves with the teacher."""

from __future__ import annotations

import torch
from torch import Tensor

from .errors import NonFiniteLossError
from .losses import neg_inf


def false_negative_mask(teacher_scores: Tensor, pos_idx: int) -> Tensor:
    """Additive mask over candidates: the dtype's minus-infinity sentinel at
    every candidate whose teacher softmax probability strictly exceeds the
    positive's, 0 elsewhere. Ties survive; the positive is never masked.

    Softmax is monotone, so the comparison outcome is identical on raw
    logits; the normalization is kept because the decision is defined on
    probabilities.
    """
    if teacher_scores.dim() != 1:
        raise ValueError("teacher_scores must be a 1-D score vector")
    n = teacher_scores.shape[0]
    if n < 2:
        raise ValueError("need at least 2 candidates")
    if not (0 <= pos_idx < n):
        raise ValueError(f"pos_idx {pos_idx} outside [0, {n})")
    if not torch.isfinite(teacher_scores).all():
        raise NonFiniteLossError("non-finite entries in teacher_scores")
    with torch.no_grad():
        probs = torch.softmax(teacher_scores.detach(), dim=0)
        higher = probs > probs[pos_idx]
        higher[pos_idx] = False
        mask = torch.where(
            higher,
            torch.full_like(probs, neg_inf(probs.dtype)),
            torch.zeros_like(probs),
        )
    return mask


def masked_count(fn_mask: Tensor) -> int:
    """Number of candidates removed by the mask."""
    return int((fn_mask < 0).sum())
