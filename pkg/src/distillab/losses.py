"""Differentiable loss terms for contrastive training and for two-level
knowledge transfer from a joint ranker (teacher) to a two-tower retriever
(student).

Score vectors are plain 1-D tensors of raw logits. Additive masks use the
most negative finite value of the tensor dtype as "minus infinity": adding
it swamps any real logit and softmax underflows to an exact zero, so masked
entries carry zero probability and zero gradient without producing NaNs.

Teacher-side inputs are detached internally; no gradient ever reaches the
teacher through these functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import NonFiniteLossError

LOSS_MODES = ("sentence", "word", "full")


def neg_inf(dtype: torch.dtype) -> float:
    """The additive-mask sentinel for the given dtype."""
    return torch.finfo(dtype).min


def _check_scores(scores: Tensor, what: str) -> None:
    if scores.dim() != 1:
        raise ValueError(f"{what} must be a 1-D score vector")
    if not torch.isfinite(scores).all():
        raise NonFiniteLossError(f"non-finite entries in {what}")


def _check_fn_mask(fn_mask: Tensor, n: int, pos_idx: int) -> None:
    if fn_mask.shape != (n,):
        raise ValueError(f"fn_mask length {tuple(fn_mask.shape)} != scores length {n}")
    if float(fn_mask[pos_idx]) != 0.0:
        raise ValueError("fn_mask must be 0 at the positive index")


def contrastive_ce(scores: Tensor, pos_idx: int, fn_mask: Tensor | None = None) -> Tensor:
    """Cross entropy of the softmax over (optionally masked) scores against
    the one-hot label at pos_idx: -log softmax(scores + fn_mask)[pos_idx].

    Masked candidates get exactly zero probability and zero gradient. If the
    mask removes every negative, the positive is the only survivor and the
    loss is exactly 0.
    """
    _check_scores(scores, "scores")
    n = scores.shape[0]
    if n < 2:
        raise ValueError("need at least 2 candidates")
    if not (0 <= pos_idx < n):
        raise ValueError(f"pos_idx {pos_idx} outside [0, {n})")
    logits = scores
    if fn_mask is not None:
        _check_fn_mask(fn_mask, n, pos_idx)
        logits = scores + fn_mask.to(scores.dtype)
    return -torch.log_softmax(logits, dim=0)[pos_idx]


def sentence_kl(
    student: Tensor,
    teacher: Tensor,
    fn_mask: Tensor | None = None,
    temperature: float = 1.0,
) -> Tensor:
    """KL divergence from the student's score distribution to the teacher's,
    sum over unmasked positions of s * log(s / t), after both score vectors
    are masked and softmax-normalized. The teacher is a constant.

    temperature divides both logit vectors before the softmax (default 1,
    i.e. the raw distributions). Masking an entry is exactly equivalent to
    dropping it and renormalizing over the survivors.
    """
    _check_scores(student, "student scores")
    _check_scores(teacher, "teacher scores")
    if student.shape != teacher.shape:
        raise ValueError(
            f"student length {student.shape[0]} != teacher length {teacher.shape[0]}"
        )
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    teacher = teacher.detach().to(student.dtype) / temperature
    student = student / temperature
    if fn_mask is not None:
        if fn_mask.shape != student.shape:
            raise ValueError("fn_mask length mismatch")
        mask = fn_mask.to(student.dtype)
        student = student + mask
        teacher = teacher + mask
        active = mask == 0
    else:
        active = torch.ones_like(student, dtype=torch.bool)
    s_logp = torch.log_softmax(student, dim=0)
    t_logp = torch.log_softmax(teacher, dim=0)
    s_p = s_logp.exp()
    terms = s_p * (s_logp - t_logp)
    return terms[active].sum()


def build_pair_mask(
    qlen: int,
    dlen: int,
    q_real_len: int,
    d_real_len: int,
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    """Binary (qlen+dlen)^2 matrix selecting only the two cross quadrants
    (query rows x doc cols and doc rows x query cols), restricted to real
    token positions. Padded rows and columns stay zero."""
    if not (1 <= q_real_len <= qlen):
        raise ValueError(f"q_real_len {q_real_len} outside [1, {qlen}]")
    if not (1 <= d_real_len <= dlen):
        raise ValueError(f"d_real_len {d_real_len} outside [1, {dlen}]")
    size = qlen + dlen
    mask = torch.zeros(size, size, dtype=dtype)
    mask[:q_real_len, qlen : qlen + d_real_len] = 1.0
    mask[qlen : qlen + d_real_len, :q_real_len] = 1.0
    return mask


def similarity_map(query_hidden: Tensor, doc_hidden: Tensor) -> Tensor:
    """All pairwise dot products between the concatenated hidden rows,
    query rows first. Symmetric by construction."""
    if query_hidden.dim() != 2 or doc_hidden.dim() != 2:
        raise ValueError("hidden states must be 2-D [tokens, hidden_dim]")
    if query_hidden.shape[1] != doc_hidden.shape[1]:
        raise ValueError(
            f"hidden_dim mismatch: {query_hidden.shape[1]} vs {doc_hidden.shape[1]}"
        )
    rows = torch.cat([query_hidden, doc_hidden], dim=0)
    return rows @ rows.T


def masked_row_softmax(sim: Tensor, mask: Tensor) -> Tensor:
    """Row softmax of sim with mask-0 entries forced to the dtype's minus
    infinity first, so they end up with exactly zero probability."""
    blocked = sim.masked_fill(mask == 0, neg_inf(sim.dtype))
    return torch.softmax(blocked, dim=-1)


def word_mse(att: Tensor, sim: Tensor, mask: Tensor, teacher_renorm: bool = True) -> Tensor:
    """Mean squared error between the teacher attention map and the masked
    row softmax of the student similarity map, accumulated over mask-1
    entries only and divided by the mask's total count.

    With teacher_renorm set (default) each teacher row is renormalized to
    sum to 1 over its active entries, putting both operands on the same
    support; disabling it compares against the raw teacher rows. Rows with
    no active entries contribute nothing. The teacher is a constant.
    """
    if att.shape != sim.shape or sim.shape != mask.shape:
        raise ValueError("att, sim, and mask must share one square shape")
    total = mask.sum()
    if float(total) == 0.0:
        raise ValueError("all-zero pair mask")
    att = att.detach().to(sim.dtype)
    mask = mask.to(sim.dtype)
    student = masked_row_softmax(sim, mask)
    if teacher_renorm:
        active = att * mask
        row_sum = active.sum(dim=-1, keepdim=True)
        teacher = active / torch.where(row_sum > 0, row_sum, torch.ones_like(row_sum))
    else:
        teacher = att
    sq = (teacher - student) ** 2 * mask
    return sq.sum() / total


@dataclass
class LossBreakdown:
    """The four loss terms and their mode-dependent sum. Components not
    active in the chosen mode are recorded as 0."""

    l_de: Tensor | float
    l_ce: Tensor | float
    l_sent: Tensor | float
    l_word: Tensor | float
    total: Tensor | float

    def as_floats(self) -> "LossBreakdown":
        def value(part):
            return float(part.detach()) if isinstance(part, Tensor) else float(part)

        return LossBreakdown(
            value(self.l_de),
            value(self.l_ce),
            value(self.l_sent),
            value(self.l_word),
            value(self.total),
        )


def total_loss(
    l_de: Tensor | float,
    l_ce: Tensor | float,
    l_sent: Tensor | float | None = None,
    l_word: Tensor | float | None = None,
    mode: str = "full",
) -> LossBreakdown:
    """Combine the loss terms for the given training mode:

    sentence -> l_de + l_ce + l_sent
    word     -> l_de + l_ce + l_word
    full     -> all four
    """
    if mode not in LOSS_MODES:
        raise ValueError(f"mode must be one of {LOSS_MODES}, got {mode!r}")
    if mode in ("sentence", "full") and l_sent is None:
        raise ValueError(f"mode {mode!r} requires l_sent")
    if mode in ("word", "full") and l_word is None:
        raise ValueError(f"mode {mode!r} requires l_word")
    use_sent = l_sent if mode in ("sentence", "full") else 0.0
    use_word = l_word if mode in ("word", "full") else 0.0
    total = l_de + l_ce + use_sent + use_word
    return LossBreakdown(l_de=l_de, l_ce=l_ce, l_sent=use_sent, l_word=use_word, total=total)
