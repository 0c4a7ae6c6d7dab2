"""Ranker-free inference: encode the corpus once, persist the embedding
matrix, and answer top-k queries by exact dot-product scoring.

The index file layout is magic bytes, a fixed-width little-endian header
(version, dim, count), a length-prefixed JSON metadata blob, the float32
row-major embedding payload, a length-prefixed doc-id table, and a trailing
SHA-256 checksum.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import load_retriever
from .data import DocumentStore, Vocabulary, tokenize
from .encoder import DualRetriever, encode, ranker_invocations
from .errors import CheckpointError

INDEX_MAGIC = b"DLIDX"
INDEX_VERSION = 1
_DIGEST_SIZE = 32


@dataclass
class EmbeddingIndex:
    """Frozen document embeddings with their aligned external ids."""

    embeddings: np.ndarray
    doc_ids: list[str]
    metadata: dict

    def __post_init__(self):
        if self.embeddings.ndim != 2:
            raise ValueError("embeddings must be a 2-D matrix")
        if self.embeddings.shape[0] != len(self.doc_ids):
            raise ValueError("row count does not match doc_ids")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class SearchResult:
    results: list[tuple[str, float]]
    latency_us: float


@dataclass
class LatencyStats:
    per_query_us: list[float]
    mean_us: float
    p50_us: float
    p95_us: float


def _encode_texts(
    retriever: DualRetriever,
    texts: Sequence[str],
    vocab: Vocabulary,
    max_len: int,
    batch_size: int,
    tower,
) -> np.ndarray:
    rows = []
    was_training = retriever.training
    retriever.eval()
    with torch.no_grad():
        for start in range(0, len(texts), batch_size):
            chunk = [tokenize(t, vocab, max_len) for t in texts[start : start + batch_size]]
            outs = encode(tower, chunk)
            rows.extend(out.cls.numpy().astype(np.float32) for out in outs)
    retriever.train(was_training)
    return np.stack(rows)


def build_index(
    checkpoint_path: str | Path,
    store: DocumentStore,
    vocab: Vocabulary,
    max_len: int,
    batch_size: int = 64,
) -> EmbeddingIndex:
    """Encode every document with the retriever's doc tower in eval mode."""
    if len(store) == 0:
        raise ValueError("empty document store")
    retriever, _, checksum = load_retriever(checkpoint_path)
    embeddings = _encode_texts(
        retriever, store.texts, vocab, max_len, batch_size, retriever.doc_encoder
    )
    metadata = {
        "dim": int(embeddings.shape[1]),
        "count": int(embeddings.shape[0]),
        "checkpoint_checksum": checksum,
        "max_len": int(max_len),
    }
    return EmbeddingIndex(embeddings, list(store.doc_ids), metadata)


def encode_query(
    retriever: DualRetriever, text: str, vocab: Vocabulary, max_len: int
) -> np.ndarray:
    was_training = retriever.training
    retriever.eval()
    with torch.no_grad():
        out = encode(retriever.query_encoder, [tokenize(text, vocab, max_len)])[0]
    retriever.train(was_training)
    return out.cls.numpy().astype(np.float32)


def search(
    index: EmbeddingIndex,
    query_text: str,
    retriever: DualRetriever,
    vocab: Vocabulary,
    k: int,
    max_len: int | None = None,
) -> SearchResult:
    """Exact top-k by dot product; ties break by ascending doc id. The
    ranker is never touched on this path, which the invocation counter
    verifies."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        raise ValueError("empty index")
    if retriever.config.hidden_dim != index.dim:
        raise ValueError(
            f"retriever hidden_dim {retriever.config.hidden_dim} != index dim {index.dim}"
        )
    if max_len is None:
        max_len = int(index.metadata.get("max_len", retriever.config.max_position - 2))
    invocations_before = ranker_invocations()
    start = time.perf_counter_ns()
    query_vec = encode_query(retriever, query_text, vocab, max_len)
    scores = index.embeddings @ query_vec
    order = np.lexsort((np.asarray(index.doc_ids), -scores))[:k]
    results = [(index.doc_ids[i], float(scores[i])) for i in order]
    latency_us = (time.perf_counter_ns() - start) / 1000.0
    if ranker_invocations() != invocations_before:
        raise RuntimeError("ranker was invoked on the search path")
    return SearchResult(results=results, latency_us=latency_us)


def measure_latency(
    index: EmbeddingIndex,
    query_texts: Sequence[str],
    retriever: DualRetriever,
    vocab: Vocabulary,
    k: int,
    repetitions: int = 3,
    max_len: int | None = None,
) -> LatencyStats:
    """Wall-clock per query (encoding plus scoring), mean of `repetitions`
    timed runs after one untimed warm-up pass."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if not query_texts:
        raise ValueError("no queries to time")
    for text in query_texts:
        search(index, text, retriever, vocab, k, max_len)
    per_query = []
    for text in query_texts:
        times = [
            search(index, text, retriever, vocab, k, max_len).latency_us
            for _ in range(repetitions)
        ]
        per_query.append(sum(times) / len(times))
    arr = np.asarray(per_query)
    return LatencyStats(
        per_query_us=per_query,
        mean_us=float(arr.mean()),
        p50_us=float(np.percentile(arr, 50)),
        p95_us=float(np.percentile(arr, 95)),
    )


def save_index(index: EmbeddingIndex, path: str | Path) -> None:
    payload = index.embeddings.astype("<f4").tobytes()
    meta_bytes = json.dumps(index.metadata, sort_keys=True).encode("utf-8")
    for doc_id in index.doc_ids:
        if "\n" in doc_id:
            raise ValueError(f"doc id contains a newline: {doc_id!r}")
    table = "\n".join(index.doc_ids).encode("utf-8")
    parts = [
        INDEX_MAGIC,
        struct.pack("<H", INDEX_VERSION),
        struct.pack("<I", index.dim),
        struct.pack("<Q", len(index)),
        struct.pack("<I", len(meta_bytes)),
        meta_bytes,
        payload,
        struct.pack("<Q", len(table)),
        table,
    ]
    content = b"".join(parts)
    Path(path).write_bytes(content + hashlib.sha256(content).digest())


def load_index(path: str | Path) -> EmbeddingIndex:
    data = Path(path).read_bytes()
    if len(data) < len(INDEX_MAGIC) + 18 + _DIGEST_SIZE:
        raise CheckpointError(f"{path}: truncated index file")
    content, stored = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    if hashlib.sha256(content).digest() != stored:
        raise CheckpointError(f"{path}: checksum mismatch")
    if content[:5] != INDEX_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    offset = 5
    (version,) = struct.unpack_from("<H", content, offset)
    offset += 2
    if version != INDEX_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (dim,) = struct.unpack_from("<I", content, offset)
    offset += 4
    (count,) = struct.unpack_from("<Q", content, offset)
    offset += 8
    (meta_len,) = struct.unpack_from("<I", content, offset)
    offset += 4
    metadata = json.loads(content[offset : offset + meta_len])
    offset += meta_len
    nbytes = dim * count * 4
    embeddings = (
        np.frombuffer(content, dtype="<f4", count=dim * count, offset=offset)
        .reshape(count, dim)
        .copy()
    )
    offset += nbytes
    (table_len,) = struct.unpack_from("<Q", content, offset)
    offset += 8
    table = content[offset : offset + table_len].decode("utf-8")
    offset += table_len
    if offset != len(content):
        raise CheckpointError(f"{path}: {len(content) - offset} unexpected trailing bytes")
    doc_ids = table.split("\n") if table else []
    if len(doc_ids) != count:
        raise CheckpointError(f"{path}: doc table length {len(doc_ids)} != count {count}")
    return EmbeddingIndex(embeddings, doc_ids, metadata)
