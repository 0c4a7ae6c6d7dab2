"""Desk-scale dense retrieval lab.

A two-tower retriever trained with contrastive loss plus score- and
attention-level knowledge transfer from a joint ranker, with dynamic
screening of teacher-flagged false negatives. Includes data ingestion,
an embedding index with exact top-k search, MRR/Recall evaluation, and a
CLI that drives the whole pipeline.
"""

__version__ = "0.1.0"

from .data import (
    DocumentStore,
    QueryGroup,
    TokenSequence,
    Vocabulary,
    build_train_groups,
    build_vocab,
    gen_synthetic,
    load_corpus,
    load_qrels,
    load_queries,
    tokenize,
)
from .encoder import (
    CrossRanker,
    DualRetriever,
    Encoder,
    EncoderConfig,
    aggregate_attention,
    cross_scores,
    dual_scores,
    encode,
    init_encoder,
    init_ranker,
    init_retriever,
)
from .filtering import false_negative_mask
from .losses import (
    LossBreakdown,
    build_pair_mask,
    contrastive_ce,
    sentence_kl,
    similarity_map,
    total_loss,
    word_mse,
)
from .metrics import EvalReport, evaluate, mrr_at_k, recall_at_k
from .search import EmbeddingIndex, build_index, load_index, measure_latency, save_index, search
from .training import TrainConfig, TrainingHistory, fit, grad_flow_check, train_step

__all__ = [
    "DocumentStore",
    "QueryGroup",
    "TokenSequence",
    "Vocabulary",
    "build_train_groups",
    "build_vocab",
    "gen_synthetic",
    "load_corpus",
    "load_qrels",
    "load_queries",
    "tokenize",
    "CrossRanker",
    "DualRetriever",
    "Encoder",
    "EncoderConfig",
    "aggregate_attention",
    "cross_scores",
    "dual_scores",
    "encode",
    "init_encoder",
    "init_ranker",
    "init_retriever",
    "false_negative_mask",
    "LossBreakdown",
    "build_pair_mask",
    "contrastive_ce",
    "sentence_kl",
    "similarity_map",
    "total_loss",
    "word_mse",
    "EvalReport",
    "evaluate",
    "mrr_at_k",
    "recall_at_k",
    "EmbeddingIndex",
    "build_index",
    "load_index",
    "measure_latency",
    "save_index",
    "search",
    "TrainConfig",
    "TrainingHistory",
    "fit",
    "grad_flow_check",
    "train_step",
]
