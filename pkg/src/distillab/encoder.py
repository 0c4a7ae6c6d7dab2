"""A compact transformer encoder that exposes per-layer attention, plus the
two wrappers used for retrieval training: a two-tower retriever scoring
documents by CLS dot product, and a joint ranker scoring the concatenation
of query and document through a scalar head.

The ranker counts its forward passes in a module-level counter so the
search path can prove it never touches the ranker.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor, nn

from .data import CLS_ID, PAD_ID, SEP_ID, TokenSequence

_ranker_invocations = 0


def ranker_invocations() -> int:
    """Joint-ranker forward passes since the last reset."""
    return _ranker_invocations


def reset_ranker_invocations() -> None:
    global _ranker_invocations
    _ranker_invocations = 0


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture knobs. max_position counts positions including the
    [CLS]/[SEP] wrapping added at encode time."""

    vocab_size: int
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    feedforward_dim: int = 128
    max_position: int = 64
    dropout_rate: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        for name in (
            "vocab_size",
            "hidden_dim",
            "num_layers",
            "num_heads",
            "feedforward_dim",
            "max_position",
        ):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.vocab_size < 4:
            raise ValueError(f"vocab_size must cover the 4 special ids, got {self.vocab_size}")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"hidden_dim divisible by num_heads required, "
                f"got hidden_dim={self.hidden_dim}, num_heads={self.num_heads}"
            )
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


def seed_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic init: Xavier-scaled normals for projection matrices
    (absolute stds like 0.02 starve signal flow at these widths), N(0, 0.02)
    for embedding tables, ones for 1-D weights (layer norms), zeros for
    biases. Same seed gives bit-identical parameters."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, param in module.named_parameters():
            if param.dim() >= 2:
                if "embedding" in name:
                    param.normal_(0.0, 0.02, generator=gen)
                else:
                    fan_out, fan_in = param.shape[0], param.shape[1]
                    std = math.sqrt(2.0 / (fan_in + fan_out))
                    param.normal_(0.0, std, generator=gen)
            elif name.endswith("bias"):
                param.zero_()
            else:
                param.fill_(1.0)


class _SelfAttention(nn.Module):
    def __init__(self, hidden_dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = hidden_dim // num_heads
        self.q_proj = nn.Linear(hidden_dim, hidden_dim)
        self.k_proj = nn.Linear(hidden_dim, hidden_dim)
        self.v_proj = nn.Linear(hidden_dim, hidden_dim)
        self.out_proj = nn.Linear(hidden_dim, hidden_dim)

    def forward(self, x: Tensor, key_valid: Tensor) -> tuple[Tensor, Tensor]:
        bsz, seq, _ = x.shape

        def heads(t: Tensor) -> Tensor:
            return t.view(bsz, seq, self.num_heads, self.head_dim).transpose(1, 2)

        q, k, v = heads(self.q_proj(x)), heads(self.k_proj(x)), heads(self.v_proj(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        bias = torch.zeros(bsz, 1, 1, seq, dtype=x.dtype, device=x.device)
        bias = bias.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        probs = torch.softmax(scores + bias, dim=-1)
        ctx = (probs @ v).transpose(1, 2).reshape(bsz, seq, -1)
        return self.out_proj(ctx), probs


class _EncoderLayer(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.attn_norm = nn.LayerNorm(config.hidden_dim)
        self.attn = _SelfAttention(config.hidden_dim, config.num_heads)
        self.ff_norm = nn.LayerNorm(config.hidden_dim)
        self.ff_in = nn.Linear(config.hidden_dim, config.feedforward_dim)
        self.ff_out = nn.Linear(config.feedforward_dim, config.hidden_dim)
        self.dropout = nn.Dropout(config.dropout_rate)

    def forward(self, x: Tensor, key_valid: Tensor) -> tuple[Tensor, Tensor]:
        attn_out, probs = self.attn(self.attn_norm(x), key_valid)
        x = x + self.dropout(attn_out)
        ff = self.ff_out(torch.nn.functional.gelu(self.ff_in(self.ff_norm(x))))
        x = x + self.dropout(ff)
        return x, probs


class Encoder(nn.Module):
    """Pre-norm transformer encoder with learned positional embeddings."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.token_embedding = nn.Embedding(config.vocab_size, config.hidden_dim)
        self.position_embedding = nn.Embedding(config.max_position, config.hidden_dim)
        self.segment_embedding = nn.Embedding(2, config.hidden_dim)
        self.layers = nn.ModuleList(_EncoderLayer(config) for _ in range(config.num_layers))
        self.final_norm = nn.LayerNorm(config.hidden_dim)
        self.dropout = nn.Dropout(config.dropout_rate)
        seed_parameters(self, config.seed)

    def forward(self, ids: Tensor, lengths: Tensor, segments: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """ids: [batch, seq] int64, real tokens packed at the front;
        lengths: [batch] real lengths; segments: [batch, seq] in {0, 1}
        (zeros when omitted; the joint ranker marks the document span with
        segment 1). Returns last-layer hidden states [batch, seq, hidden]
        and the attention stack [batch, layers, heads, seq, seq]. PAD key
        positions get exactly zero attention weight."""
        if ids.dim() != 2:
            raise ValueError("ids must be [batch, seq]")
        _, seq = ids.shape
        if seq > self.config.max_position:
            raise ValueError(
                f"sequence length {seq} exceeds max_position {self.config.max_position}"
            )
        top = int(ids.max())
        if top >= self.config.vocab_size:
            raise ValueError(f"token id {top} >= vocab_size {self.config.vocab_size}")
        positions = torch.arange(seq, device=ids.device)
        key_valid = positions[None, :] < lengths[:, None].to(ids.device)
        x = self.token_embedding(ids) + self.position_embedding(positions)[None]
        if segments is not None:
            x = x + self.segment_embedding(segments)
        x = self.dropout(x)
        stacks = []
        for layer in self.layers:
            x, probs = layer(x, key_valid)
            stacks.append(probs)
        return self.final_norm(x), torch.stack(stacks, dim=1)


@dataclass
class EncoderOutput:
    """Per-sequence encoder outputs. token_span is the half-open range of
    real (non-special, non-PAD) positions within `hidden`."""

    hidden: Tensor
    attentions: Tensor
    token_span: tuple[int, int]

    @property
    def cls(self) -> Tensor:
        return self.hidden[0]

    @property
    def token_hidden(self) -> Tensor:
        return self.hidden[self.token_span[0] : self.token_span[1]]


def init_encoder(config: EncoderConfig) -> Encoder:
    return Encoder(config)


def encode(encoder: Encoder, sequences: Sequence[TokenSequence]) -> list[EncoderOutput]:
    """Encode a batch of sequences laid out as [CLS] tokens [SEP] PAD...
    All sequences must share max_len. Deterministic in eval mode."""
    if not sequences:
        raise ValueError("no sequences to encode")
    max_len = sequences[0].max_len
    if any(s.max_len != max_len for s in sequences):
        raise ValueError("all sequences must share max_len")
    rows, lengths, spans = [], [], []
    for s in sequences:
        row = [CLS_ID, *s.ids[: s.length], SEP_ID] + [PAD_ID] * (max_len - s.length)
        rows.append(row)
        lengths.append(s.length + 2)
        spans.append((1, 1 + s.length))
    ids = torch.tensor(rows, dtype=torch.long)
    hidden, attn = encoder(ids, torch.tensor(lengths, dtype=torch.long))
    return [
        EncoderOutput(hidden=hidden[i], attentions=attn[i], token_span=spans[i])
        for i in range(len(sequences))
    ]


class DualRetriever(nn.Module):
    """Two independently parameterized towers; the doc tower derives its
    init seed from the query tower's (seed + 1)."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.query_encoder = Encoder(config)
        self.doc_encoder = Encoder(dataclasses.replace(config, seed=config.seed + 1))


def init_retriever(config: EncoderConfig) -> DualRetriever:
    return DualRetriever(config)


def dot_scores(query_cls: Tensor, doc_cls: Tensor) -> Tensor:
    """Raw relevance logits: dot product of pooled vectors."""
    return doc_cls @ query_cls


def dual_scores(
    retriever: DualRetriever, query: TokenSequence, docs: Sequence[TokenSequence]
) -> tuple[Tensor, EncoderOutput, list[EncoderOutput]]:
    """Score each document against the query by CLS dot product."""
    if not docs:
        raise ValueError("document list is empty")
    q_out = encode(retriever.query_encoder, [query])[0]
    d_outs = encode(retriever.doc_encoder, list(docs))
    doc_cls = torch.stack([d.cls for d in d_outs])
    return dot_scores(q_out.cls, doc_cls), q_out, d_outs


@dataclass(frozen=True)
class CrossInput:
    """Concatenated [CLS] query [SEP] document [SEP] layout, padded.
    Spans are half-open position ranges of the real query/document tokens."""

    ids: tuple[int, ...]
    length: int
    query_span: tuple[int, int]
    doc_span: tuple[int, int]


class CrossRanker(nn.Module):
    """Encoder over the concatenated pair with a scalar relevance head."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.encoder = Encoder(config)
        self.score_head = nn.Linear(config.hidden_dim, 1)
        seed_parameters(self.score_head, config.seed + 2)

    def forward(
        self, ids: Tensor, lengths: Tensor, segments: Tensor | None = None
    ) -> tuple[Tensor, Tensor, Tensor]:
        global _ranker_invocations
        _ranker_invocations += 1
        hidden, attn = self.encoder(ids, lengths, segments)
        return self.score_head(hidden[:, 0]).squeeze(-1), hidden, attn


def init_ranker(config: EncoderConfig) -> CrossRanker:
    return CrossRanker(config)


def cross_scores(
    ranker: CrossRanker, query: TokenSequence, docs: Sequence[TokenSequence]
) -> tuple[Tensor, list[Tensor], list[CrossInput]]:
    """Score each (query, doc) concatenation; also return the per-pair raw
    attention stacks [layers, heads, seq, seq] kept for distillation."""
    if not docs:
        raise ValueError("document list is empty")
    qr = query.length
    q_real = list(query.ids[:qr])
    needs = [qr + d.length + 3 for d in docs]
    worst = max(needs)
    if worst > ranker.config.max_position:
        raise ValueError(
            f"concatenated length {worst} exceeds max_position "
            f"{ranker.config.max_position}; truncate query/document upstream"
        )
    seq = worst
    rows, segs, lengths, inputs = [], [], [], []
    for d, need in zip(docs, needs):
        d_real = list(d.ids[: d.length])
        row = [CLS_ID, *q_real, SEP_ID, *d_real, SEP_ID] + [PAD_ID] * (seq - need)
        seg = [0] * (2 + qr) + [1] * (d.length + 1) + [0] * (seq - need)
        rows.append(row)
        segs.append(seg)
        lengths.append(need)
        inputs.append(
            CrossInput(
                ids=tuple(row),
                length=need,
                query_span=(1, 1 + qr),
                doc_span=(2 + qr, 2 + qr + d.length),
            )
        )
    ids = torch.tensor(rows, dtype=torch.long)
    scores, _, attn = ranker(
        ids, torch.tensor(lengths, dtype=torch.long), torch.tensor(segs, dtype=torch.long)
    )
    stacks = [attn[i] for i in range(len(docs))]
    return scores, stacks, inputs


@dataclass
class AttentionMap:
    """Mean attention over layers and heads, restricted to real token
    positions: query rows/cols first, then document rows/cols."""

    matrix: Tensor
    query_len: int
    doc_len: int


def aggregate_attention(stack: Tensor, cross_input: CrossInput) -> AttentionMap:
    """Mean over the layer and head dimensions, then drop every row/column
    at a special-token or PAD position."""
    if stack.dim() != 4 or stack.shape[-1] != stack.shape[-2]:
        raise ValueError("attention stack must be [layers, heads, seq, seq]")
    seq = stack.shape[-1]
    q0, q1 = cross_input.query_span
    d0, d1 = cross_input.doc_span
    if seq != len(cross_input.ids) or d1 > cross_input.length or cross_input.length > seq:
        raise ValueError("span bookkeeping inconsistent with the attention stack shape")
    mean = stack.mean(dim=(0, 1))
    keep = torch.cat([torch.arange(q0, q1), torch.arange(d0, d1)])
    matrix = mean.index_select(0, keep).index_select(1, keep)
    return AttentionMap(matrix=matrix, query_len=q1 - q0, doc_len=d1 - d0)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over parameter names and raw float bytes, in module order."""
    digest = hashlib.sha256()
    for name, param in module.named_parameters():
        digest.update(name.encode())
        digest.update(param.detach().cpu().numpy().tobytes())
    return digest.hexdigest()
