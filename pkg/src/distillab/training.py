"""Joint training of the two-tower retriever and the joint ranker.

One optimization loop drives both models. Every step the ranker scores the
candidate groups (its own cross-entropy signal), and depending on the mode
the retriever additionally learns from the ranker's score distribution,
from its averaged cross-attention maps, or both, with teacher-flagged
false negatives screened out of the student-side terms. The teacher side
of every distillation term is detached: those terms never update the
ranker.

Modes, matching the ablation switches exposed by the CLI:

    basic  contrastive terms only
    sd     + score (sentence-level) distillation
    wd     + attention-map (word-level) distillation
    fnf    + false-negative screening of the student terms
    sd+wd  both distillation terms, no screening
    full   everything
"""

from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .checkpoint import save_ranker, save_retriever
from .data import QueryGroup
from .encoder import (
    CrossRanker,
    DualRetriever,
    EncoderConfig,
    aggregate_attention,
    cross_scores,
    dual_scores,
)
from .errors import DivergenceError, NonFiniteLossError
from .filtering import false_negative_mask, masked_count
from .losses import (
    LossBreakdown,
    build_pair_mask,
    contrastive_ce,
    sentence_kl,
    similarity_map,
    total_loss,
    word_mse,
)

MODES = ("basic", "sd", "wd", "fnf", "sd+wd", "full")


def sentence_distill_active(mode: str) -> bool:
    return mode in ("sd", "sd+wd", "full")


def word_distill_active(mode: str) -> bool:
    return mode in ("wd", "sd+wd", "full")


def filter_active(mode: str) -> bool:
    return mode in ("fnf", "full")


def warmup_scale(step: int, total_steps: int, warmup_ratio: float) -> float:
    """Linear warmup factor: 0 at step 0, 1 exactly at
    ceil(warmup_ratio * total_steps), constant afterwards."""
    warm = math.ceil(warmup_ratio * total_steps)
    if warm <= 0:
        return 1.0
    return min(1.0, step / warm)


@dataclass
class TrainConfig:
    retriever_config: EncoderConfig
    ranker_config: EncoderConfig
    mode: str = "full"
    epochs: int = 3
    batch_size: int = 8
    group_size: int = 8
    lr_retriever: float = 1e-3
    lr_ranker: float = 1e-3
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    weight_decay_ranker: float | None = None
    seed: int = 0
    teacher_renorm: bool = True
    distill_temperature: float = 1.0
    checkpoint_every: int = 0
    weight_de: float = 1.0
    weight_ce: float = 1.0
    weight_sent: float = 1.0
    weight_word: float = 1.0
    divergence_threshold: float = 1e3
    divergence_patience: int = 50

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.lr_retriever <= 0 or self.lr_ranker <= 0:
            raise ValueError("learning rates must be positive")
        if not (0.0 <= self.warmup_ratio <= 1.0):
            raise ValueError("warmup_ratio must be in [0, 1]")
        if self.distill_temperature <= 0:
            raise ValueError("distill_temperature must be positive")
        self.retriever_config.validate()
        self.ranker_config.validate()


@dataclass
class StepReport:
    losses: LossBreakdown
    masked_negatives: int
    grad_norm_retriever: float
    grad_norm_ranker: float
    duration_s: float


@dataclass
class EpochRecord:
    epoch: int
    l_de: float
    l_ce: float
    l_sent: float
    l_word: float
    total: float
    heldout_mrr10: float
    masked_rate: float


@dataclass
class TrainingHistory:
    baseline_mrr10: float
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class FitResult:
    retriever: DualRetriever
    ranker: CrossRanker
    retriever_path: Path
    ranker_path: Path
    history: TrainingHistory


def _group_losses(
    retriever: DualRetriever,
    ranker: CrossRanker,
    group: QueryGroup,
    *,
    mode: str,
    teacher_renorm: bool,
    weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0),
    train_mode: bool = True,
    use_filter: bool | None = None,
    temperature: float = 1.0,
) -> tuple[LossBreakdown, int]:
    """Loss terms for one query group. Teacher targets (scores, attention
    stacks) come from a dropout-free no-grad pass; the ranker's own
    cross-entropy comes from a separate grad-enabled pass so it keeps
    training on the full, unmasked candidate list."""
    docs = list(group.docs)
    w_de, w_ce, w_sent, w_word = weights
    need_sent = sentence_distill_active(mode)
    need_word = word_distill_active(mode)
    need_filter = filter_active(mode) if use_filter is None else use_filter

    retriever.train(train_mode)
    ranker.train(train_mode)
    ce_scores, _, _ = cross_scores(ranker, group.query, docs)
    l_ce = contrastive_ce(ce_scores, group.pos_idx)

    t_scores = t_stacks = t_inputs = None
    if need_sent or need_word or need_filter:
        ranker.eval()
        with torch.no_grad():
            t_scores, t_stacks, t_inputs = cross_scores(ranker, group.query, docs)
        ranker.train(train_mode)

    fn_mask = false_negative_mask(t_scores, group.pos_idx) if need_filter else None
    n_masked = masked_count(fn_mask) if fn_mask is not None else 0

    s_scores, q_out, d_outs = dual_scores(retriever, group.query, docs)
    l_de = contrastive_ce(s_scores, group.pos_idx, fn_mask)

    l_sent = sentence_kl(s_scores, t_scores, fn_mask, temperature) if need_sent else None

    l_word = None
    if need_word:
        q_hidden = q_out.token_hidden
        num = 0.0
        den = 0.0
        for i, d_out in enumerate(d_outs):
            if fn_mask is not None and float(fn_mask[i]) < 0:
                continue  # screened candidates drop out of the word-level average
            att = aggregate_attention(t_stacks[i], t_inputs[i])
            pair_mask = build_pair_mask(
                att.query_len, att.doc_len, att.query_len, att.doc_len, dtype=q_hidden.dtype
            )
            pair = word_mse(
                att.matrix, similarity_map(q_hidden, d_out.token_hidden), pair_mask, teacher_renorm
            )
            cnt = float(pair_mask.sum())
            num = num + pair * cnt
            den += cnt
        l_word = num / den

    if mode in ("basic", "fnf"):
        breakdown = total_loss(w_de * l_de, w_ce * l_ce, l_sent=0.0, l_word=0.0, mode="full")
    elif mode == "sd":
        breakdown = total_loss(w_de * l_de, w_ce * l_ce, l_sent=w_sent * l_sent, mode="sentence")
    elif mode == "wd":
        breakdown = total_loss(w_de * l_de, w_ce * l_ce, l_word=w_word * l_word, mode="word")
    else:
        breakdown = total_loss(
            w_de * l_de,
            w_ce * l_ce,
            l_sent=w_sent * l_sent,
            l_word=w_word * l_word,
            mode="full",
        )
    return breakdown, n_masked


def _grad_norm(module: torch.nn.Module) -> float:
    total = 0.0
    for param in module.parameters():
        if param.grad is not None:
            total += float((param.grad**2).sum())
    return math.sqrt(total)


def train_step(
    retriever: DualRetriever,
    ranker: CrossRanker,
    batch: Sequence[QueryGroup],
    config: TrainConfig,
    retriever_opt: torch.optim.Optimizer,
    ranker_opt: torch.optim.Optimizer,
) -> StepReport:
    """One optimization step over a batch of groups (mean of group losses)."""
    if not batch:
        raise ValueError("empty batch")
    start = time.perf_counter()
    weights = (config.weight_de, config.weight_ce, config.weight_sent, config.weight_word)
    sums: list = [0.0, 0.0, 0.0, 0.0, 0.0]
    masked = 0
    for group in batch:
        breakdown, n_masked = _group_losses(
            retriever,
            ranker,
            group,
            mode=config.mode,
            teacher_renorm=config.teacher_renorm,
            weights=weights,
            temperature=config.distill_temperature,
        )
        masked += n_masked
        for i, part in enumerate(
            (breakdown.l_de, breakdown.l_ce, breakdown.l_sent, breakdown.l_word, breakdown.total)
        ):
            sums[i] = sums[i] + part
    inv = 1.0 / len(batch)
    mean = LossBreakdown(*(part * inv for part in sums))
    floats = mean.as_floats()
    if not all(
        math.isfinite(v)
        for v in (floats.l_de, floats.l_ce, floats.l_sent, floats.l_word, floats.total)
    ):
        raise NonFiniteLossError(
            f"non-finite loss: de={floats.l_de} ce={floats.l_ce} "
            f"sent={floats.l_sent} word={floats.l_word}"
        )
    retriever_opt.zero_grad(set_to_none=True)
    ranker_opt.zero_grad(set_to_none=True)
    mean.total.backward()
    grad_r = _grad_norm(retriever)
    grad_k = _grad_norm(ranker)
    retriever_opt.step()
    ranker_opt.step()
    return StepReport(
        losses=floats,
        masked_negatives=masked,
        grad_norm_retriever=grad_r,
        grad_norm_ranker=grad_k,
        duration_s=time.perf_counter() - start,
    )


def evaluate_heldout(retriever: DualRetriever, groups: Sequence[QueryGroup], k: int = 10) -> float:
    """MRR@k of the positive within each group's candidate list, retriever
    only, dropout disabled. Ties rank by candidate index."""
    if not groups:
        raise ValueError("no held-out groups")
    was_training = retriever.training
    retriever.eval()
    total = 0.0
    with torch.no_grad():
        for group in groups:
            scores, _, _ = dual_scores(retriever, group.query, list(group.docs))
            values = scores.tolist()
            pos = values[group.pos_idx]
            rank = 1
            for j, v in enumerate(values):
                if j == group.pos_idx:
                    continue
                if v > pos or (v == pos and j < group.pos_idx):
                    rank += 1
            if rank <= k:
                total += 1.0 / rank
    retriever.train(was_training)
    return total / len(groups)


def grad_flow_check(
    retriever: DualRetriever,
    ranker: CrossRanker,
    group: QueryGroup,
    teacher_renorm: bool = True,
) -> dict[str, float]:
    """Verify the freeze rule on one group: the distillation terms send no
    gradient to the ranker (its signal is the cross-entropy term alone),
    and the retriever receives gradient from each of its terms. Runs with
    screening disabled so every term is non-degenerate. Raises on
    violation; returns the measured gradient norms."""
    breakdown, _ = _group_losses(
        retriever,
        ranker,
        group,
        mode="full",
        teacher_renorm=teacher_renorm,
        train_mode=False,
        use_filter=False,
    )
    r_params = list(retriever.parameters())
    k_params = list(ranker.parameters())

    def norm_of(scalar, params):
        grads = torch.autograd.grad(scalar, params, retain_graph=True, allow_unused=True)
        total = 0.0
        for g in grads:
            if g is not None:
                total += float((g**2).sum())
        return math.sqrt(total)

    report = {
        "ranker_from_distill": norm_of(breakdown.l_sent + breakdown.l_word, k_params),
        "ranker_from_ce": norm_of(breakdown.l_ce, k_params),
        "retriever_from_de": norm_of(breakdown.l_de, r_params),
        "retriever_from_sent": norm_of(breakdown.l_sent, r_params),
        "retriever_from_word": norm_of(breakdown.l_word, r_params),
        "retriever_from_ce": norm_of(breakdown.l_ce, r_params),
    }
    if report["ranker_from_distill"] != 0.0:
        raise RuntimeError(
            f"distillation terms leaked gradient into the ranker: {report['ranker_from_distill']}"
        )
    if report["ranker_from_ce"] == 0.0:
        raise RuntimeError("cross-entropy term produced no ranker gradient")
    if report["retriever_from_ce"] != 0.0:
        raise RuntimeError("ranker cross entropy leaked gradient into the retriever")
    for key in ("retriever_from_de", "retriever_from_sent", "retriever_from_word"):
        if report[key] == 0.0:
            raise RuntimeError(f"{key} produced no retriever gradient")
    return report


def fit(
    config: TrainConfig,
    train_groups: Sequence[QueryGroup],
    heldout_groups: Sequence[QueryGroup],
    out_dir: str | Path,
) -> FitResult:
    """Run the configured number of epochs with linear warmup, evaluating
    held-out MRR@10 with the retriever alone after every epoch, and persist
    both final checkpoints under out_dir."""
    config.validate()
    if not train_groups:
        raise ValueError("no training groups")
    if not heldout_groups:
        raise ValueError("no held-out groups")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    retriever = DualRetriever(config.retriever_config)
    ranker = CrossRanker(config.ranker_config)
    retriever_opt = torch.optim.AdamW(
        retriever.parameters(), lr=config.lr_retriever, weight_decay=config.weight_decay
    )
    ranker_wd = (
        config.weight_decay if config.weight_decay_ranker is None else config.weight_decay_ranker
    )
    ranker_opt = torch.optim.AdamW(
        ranker.parameters(), lr=config.lr_ranker, weight_decay=ranker_wd
    )

    steps_per_epoch = math.ceil(len(train_groups) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    history = TrainingHistory(baseline_mrr10=evaluate_heldout(retriever, heldout_groups))
    rng = random.Random(config.seed)
    bad_steps = 0
    global_step = 0

    for epoch in range(config.epochs):
        order = list(range(len(train_groups)))
        rng.shuffle(order)
        comp_sums = [0.0] * 5
        masked_total = 0
        negatives_total = 0
        n_steps = 0
        for start in range(0, len(order), config.batch_size):
            batch = [train_groups[i] for i in order[start : start + config.batch_size]]
            scale = warmup_scale(global_step, total_steps, config.warmup_ratio)
            for opt, base in ((retriever_opt, config.lr_retriever), (ranker_opt, config.lr_ranker)):
                for pg in opt.param_groups:
                    pg["lr"] = base * scale
            report = train_step(retriever, ranker, batch, config, retriever_opt, ranker_opt)
            global_step += 1
            n_steps += 1
            f = report.losses
            for i, v in enumerate((f.l_de, f.l_ce, f.l_sent, f.l_word, f.total)):
                comp_sums[i] += v
            masked_total += report.masked_negatives
            negatives_total += sum(len(g.docs) - 1 for g in batch)
            if f.total > config.divergence_threshold:
                bad_steps += 1
            else:
                bad_steps = 0
            if bad_steps >= config.divergence_patience:
                raise DivergenceError(
                    f"loss above {config.divergence_threshold} for "
                    f"{config.divergence_patience} consecutive steps",
                    history=history,
                )
        heldout = evaluate_heldout(retriever, heldout_groups)
        history.records.append(
            EpochRecord(
                epoch=epoch,
                l_de=comp_sums[0] / n_steps,
                l_ce=comp_sums[1] / n_steps,
                l_sent=comp_sums[2] / n_steps,
                l_word=comp_sums[3] / n_steps,
                total=comp_sums[4] / n_steps,
                heldout_mrr10=heldout,
                masked_rate=masked_total / max(negatives_total, 1),
            )
        )
        if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            meta = {"mode": config.mode, "seed": config.seed, "epoch": epoch}
            save_retriever(out / f"epoch{epoch:03d}.retriever", retriever, meta)
            save_ranker(out / f"epoch{epoch:03d}.ranker", ranker, meta)

    metadata = {"mode": config.mode, "seed": config.seed, "epochs": config.epochs}
    retriever_path = out / "checkpoint.retriever"
    ranker_path = out / "checkpoint.ranker"
    save_retriever(retriever_path, retriever, metadata)
    save_ranker(ranker_path, ranker, metadata)
    return FitResult(retriever, ranker, retriever_path, ranker_path, history)


_HISTORY_COLUMNS = (
    "epoch",
    "l_de",
    "l_ce",
    "l_sent",
    "l_word",
    "total",
    "heldout_mrr10",
    "masked_rate",
)


def write_history(history: TrainingHistory, path: str | Path) -> None:
    """One tab-separated record per epoch."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(_HISTORY_COLUMNS) + "\n")
        for r in history.records:
            fh.write(
                "\t".join(
                    str(v)
                    for v in (
                        r.epoch,
                        r.l_de,
                        r.l_ce,
                        r.l_sent,
                        r.l_word,
                        r.total,
                        r.heldout_mrr10,
                        r.masked_rate,
                    )
                )
                + "\n"
            )


def read_history(path: str | Path) -> list[EpochRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != _HISTORY_COLUMNS:
            raise ValueError(f"unexpected history header: {header}")
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            records.append(
                EpochRecord(
                    epoch=int(parts[0]),
                    l_de=float(parts[1]),
                    l_ce=float(parts[2]),
                    l_sent=float(parts[3]),
                    l_word=float(parts[4]),
                    total=float(parts[5]),
                    heldout_mrr10=float(parts[6]),
                    masked_rate=float(parts[7]),
                )
            )
    return records
