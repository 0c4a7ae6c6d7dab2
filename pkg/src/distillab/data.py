"""Corpus ingestion, tokenization, and training-group assembly.

All file formats are tab-separated UTF-8 with LF line endings:

    corpus.tsv   <doc_id>\\t<text>
    queries.tsv  <query_id>\\t<text>
    qrels.tsv    <query_id>\\t<doc_id>

The synthetic generator produces corpora whose relevance signal is plain
token overlap, so a retriever trained from scratch has something to learn
and an overlap-counting oracle can sanity-check the generated data.
"""

from __future__ import annotations

import math
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DataFormatError

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
SEP_ID = 3

SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN)


def split_tokens(text: str) -> list[str]:
    """Lowercase whitespace tokenization. Total: never raises."""
    return text.lower().split()


@dataclass(frozen=True)
class Vocabulary:
    """Token-to-id table with the four reserved ids pinned at 0..3."""

    token_to_id: Mapping[str, int]

    def __post_init__(self):
        for want, tok in enumerate(SPECIAL_TOKENS):
            if self.token_to_id.get(tok) != want:
                raise DataFormatError(f"special token {tok} must map to id {want}")
        ids = list(self.token_to_id.values())
        if len(set(ids)) != len(ids):
            raise DataFormatError("vocabulary mapping is not injective")

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def id_for(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def inverse(self) -> dict[int, str]:
        return {i: t for t, i in self.token_to_id.items()}


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-width id sequence: `length` real tokens, PAD for the rest."""

    ids: tuple[int, ...]
    length: int
    max_len: int

    def __post_init__(self):
        if not (0 <= self.length <= self.max_len):
            raise ValueError(f"length {self.length} outside [0, {self.max_len}]")
        if len(self.ids) != self.max_len:
            raise ValueError("ids must be padded to max_len")


@dataclass
class DocumentStore:
    """Immutable-by-convention list of documents with unique external ids."""

    doc_ids: list[str]
    texts: list[str]
    _pos: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.doc_ids) != len(self.texts):
            raise DataFormatError("doc_ids and texts differ in length")
        self._pos = {}
        for i, doc_id in enumerate(self.doc_ids):
            if doc_id in self._pos:
                raise DataFormatError(f"duplicate doc id {doc_id!r}")
            self._pos[doc_id] = i

    def __len__(self) -> int:
        return len(self.doc_ids)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._pos

    def text_for(self, doc_id: str) -> str:
        return self.texts[self._pos[doc_id]]


@dataclass(frozen=True)
class QueryGroup:
    """One query with its candidate documents; exactly one is the positive."""

    query_id: str
    query: TokenSequence
    docs: tuple[TokenSequence, ...]
    pos_idx: int
    doc_ids: tuple[str, ...]

    def __post_init__(self):
        n = len(self.docs)
        if n < 2:
            raise ValueError("a query group needs at least 2 candidates")
        if not (0 <= self.pos_idx < n):
            raise ValueError(f"pos_idx {self.pos_idx} outside [0, {n})")
        if len(self.doc_ids) != n:
            raise ValueError("doc_ids and docs differ in length")


def build_vocab(store: DocumentStore, queries: Iterable[str], min_freq: int = 1) -> Vocabulary:
    """Vocabulary over corpus and query texts, keeping tokens with frequency
    >= min_freq. Kept tokens are assigned ids in lexicographic order, so the
    result does not depend on input order at all."""
    texts = list(store.texts) + list(queries)
    if not texts:
        raise DataFormatError("empty corpus")
    counts: Counter[str] = Counter()
    for text in texts:
        counts.update(split_tokens(text))
    kept = sorted(tok for tok, c in counts.items() if c >= min_freq)
    mapping = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
    for tok in kept:
        mapping[tok] = len(mapping)
    return Vocabulary(mapping)


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """Lowercase whitespace split, UNK for out-of-vocabulary tokens,
    truncation to max_len, PAD fill."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    toks = split_tokens(text)[:max_len]
    ids = [vocab.id_for(t) for t in toks]
    length = len(ids)
    ids.extend([PAD_ID] * (max_len - length))
    return TokenSequence(tuple(ids), length, max_len)


def _read_two_column(path: str | Path) -> Iterable[tuple[int, str, str]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 2 tab-separated fields, got {len(parts)}"
                )
            yield lineno, parts[0], parts[1]


def load_corpus(path: str | Path) -> DocumentStore:
    doc_ids: list[str] = []
    texts: list[str] = []
    seen: set[str] = set()
    for lineno, doc_id, text in _read_two_column(path):
        if doc_id in seen:
            raise DataFormatError(f"{path}:{lineno}: duplicate doc id {doc_id!r}")
        seen.add(doc_id)
        doc_ids.append(doc_id)
        texts.append(text)
    if not doc_ids:
        raise DataFormatError(f"{path}: empty corpus")
    return DocumentStore(doc_ids, texts)


def load_queries(path: str | Path) -> dict[str, str]:
    queries: dict[str, str] = {}
    for lineno, qid, text in _read_two_column(path):
        if qid in queries:
            raise DataFormatError(f"{path}:{lineno}: duplicate query id {qid!r}")
        queries[qid] = text
    return queries


def load_qrels(path: str | Path) -> dict[str, list[str]]:
    """Relevance judgements as query id -> relevant doc ids, preserving file
    order per query (the first listed doc is the canonical positive)."""
    qrels: dict[str, list[str]] = {}
    for _, qid, doc_id in _read_two_column(path):
        rels = qrels.setdefault(qid, [])
        if doc_id not in rels:
            rels.append(doc_id)
    return qrels


def _check_tsv_field(value: str, what: str) -> str:
    if "\t" in value or "\n" in value:
        raise DataFormatError(f"{what} contains a tab or newline: {value!r}")
    return value


def save_corpus(path: str | Path, store: DocumentStore) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for doc_id, text in zip(store.doc_ids, store.texts):
            fh.write(f"{_check_tsv_field(doc_id, 'doc id')}\t{_check_tsv_field(text, 'text')}\n")


def save_queries(path: str | Path, queries: Mapping[str, str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, text in queries.items():
            fh.write(f"{_check_tsv_field(qid, 'query id')}\t{_check_tsv_field(text, 'text')}\n")


def save_qrels(path: str | Path, qrels: Mapping[str, Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, rels in qrels.items():
            for doc_id in rels:
                fh.write(f"{qid}\t{doc_id}\n")


def save_qids(path: str | Path, qids: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid in qids:
            fh.write(f"{qid}\n")


def load_qids(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def save_vocab(path: str | Path, vocab: Vocabulary) -> None:
    inverse = vocab.inverse()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for idx in range(vocab.size):
            fh.write(f"{inverse[idx]}\t{idx}\n")


def load_vocab(path: str | Path) -> Vocabulary:
    mapping: dict[str, int] = {}
    for lineno, tok, idx in _read_two_column(path):
        try:
            mapping[tok] = int(idx)
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: bad id {idx!r}") from exc
    return Vocabulary(mapping)


def build_train_groups(
    queries: Mapping[str, str],
    qrels: Mapping[str, Sequence[str]],
    store: DocumentStore,
    vocab: Vocabulary,
    group_size: int,
    seed: int,
    max_len_query: int,
    max_len_doc: int,
) -> list[QueryGroup]:
    """One group per query: the first relevant doc as the positive (index 0)
    plus group_size-1 negatives sampled uniformly without replacement from
    the non-relevant documents. Deterministic per (seed, query order)."""
    if group_size < 2:
        raise ValueError("group_size must be >= 2")
    if group_size > len(store):
        raise DataFormatError(
            f"group size {group_size} exceeds corpus size {len(store)}"
        )
    rng = random.Random(seed)
    groups: list[QueryGroup] = []
    for qid, qtext in queries.items():
        rels = list(qrels.get(qid, []))
        if not rels:
            raise DataFormatError(f"query {qid} has no relevant documents")
        pos_id = rels[0]
        if pos_id not in store:
            raise DataFormatError(f"relevant doc {pos_id!r} for query {qid} not in corpus")
        relset = set(rels)
        pool = [d for d in store.doc_ids if d not in relset]
        if len(pool) < group_size - 1:
            raise DataFormatError(
                f"query {qid}: only {len(pool)} non-relevant docs, need {group_size - 1}"
            )
        neg_ids = rng.sample(pool, group_size - 1)
        ids = [pos_id] + neg_ids
        docs = tuple(tokenize(store.text_for(d), vocab, max_len_doc) for d in ids)
        groups.append(
            QueryGroup(qid, tokenize(qtext, vocab, max_len_query), docs, 0, tuple(ids))
        )
    return groups


# Fraction of each query's tokens planted in its relevant document. Must stay
# >= 0.5 so token overlap recovers relevance.
_SHARED_FRACTION = 1.0
_TOPIC_RETRIES = 1000


def gen_synthetic(
    num_docs: int,
    num_queries: int,
    vocab_size: int,
    doc_len: int,
    query_len: int,
    seed: int,
) -> tuple[DocumentStore, dict[str, str], dict[str, list[str]]]:
    """Synthetic retrieval set. Each query draws a distinct topic token set;
    its one relevant document contains at least half of the query tokens and
    every other document is uniform noise over the vocabulary."""
    if num_queries > num_docs:
        raise ValueError("num_queries must be <= num_docs")
    if min(num_docs, num_queries, vocab_size, doc_len, query_len) < 1:
        raise ValueError("all sizes must be >= 1")
    if vocab_size < query_len or math.comb(vocab_size, query_len) < num_queries:
        raise ValueError("vocab_size too small to allocate distinct topics")
    k_shared = max(1, math.ceil(_SHARED_FRACTION * query_len))
    if doc_len < k_shared:
        raise ValueError(f"doc_len must be >= {k_shared} to fit the shared tokens")

    words = [f"w{i:04d}" for i in range(vocab_size)]
    rng = random.Random(seed)

    seen_topics: set[frozenset[str]] = set()
    query_tokens: list[list[str]] = []
    for _ in range(num_queries):
        for attempt in range(_TOPIC_RETRIES):
            cand = rng.sample(words, query_len)
            key = frozenset(cand)
            if key not in seen_topics:
                seen_topics.add(key)
                query_tokens.append(cand)
                break
        else:
            raise ValueError("vocab_size too small to allocate distinct topics")

    texts: list[str] = []
    for toks in query_tokens:
        doc = rng.sample(toks, k_shared)
        doc += [rng.choice(words) for _ in range(doc_len - k_shared)]
        rng.shuffle(doc)
        texts.append(" ".join(doc))
    for _ in range(num_docs - num_queries):
        texts.append(" ".join(rng.choice(words) for _ in range(doc_len)))

    order = list(range(num_docs))
    rng.shuffle(order)
    doc_ids = [f"D{i:05d}" for i in range(num_docs)]
    store = DocumentStore(doc_ids, [texts[orig] for orig in order])
    slot_of = {orig: slot for slot, orig in enumerate(order)}

    queries = {f"Q{i:04d}": " ".join(toks) for i, toks in enumerate(query_tokens)}
    qrels = {f"Q{i:04d}": [doc_ids[slot_of[i]]] for i in range(num_queries)}
    return store, queries, qrels


def split_queries(
    queries: Mapping[str, str], train_count: int, heldout_count: int
) -> tuple[dict[str, str], dict[str, str]]:
    """Deterministic prefix/suffix split by query order."""
    qids = list(queries)
    if train_count + heldout_count > len(qids):
        raise ValueError("split sizes exceed the number of queries")
    train = {q: queries[q] for q in qids[:train_count]}
    heldout = {q: queries[q] for q in qids[train_count : train_count + heldout_count]}
    return train, heldout
