"""Ranking quality metrics over run files.

A run is a mapping from query id to the ranked (descending score) list of
retrieved doc ids. Run files hold one line per retrieved document:

    <query_id>\\t<doc_id>\\t<rank>\\t<score>

with rank ascending from 1 within each query.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .errors import DataFormatError

_METRIC_RE = re.compile(r"^(mrr|recall|r)@(\d+)$")


def parse_metric(spec: str) -> tuple[str, int]:
    """Parse 'mrr@10' / 'recall@50' / 'r@50' into (name, k)."""
    m = _METRIC_RE.match(spec.strip().lower())
    if not m:
        raise ValueError(f"bad metric spec {spec!r}; expected like 'mrr@10' or 'recall@50'")
    name = "recall" if m.group(1) in ("recall", "r") else "mrr"
    k = int(m.group(2))
    if k < 1:
        raise ValueError(f"metric cutoff must be >= 1, got {k}")
    return name, k


def _reciprocal_rank(ranked: Sequence[str], relevant: set[str], k: int) -> float:
    for pos, doc_id in enumerate(ranked[:k], start=1):
        if doc_id in relevant:
            return 1.0 / pos
    return 0.0


def mrr_at_k(run: Mapping[str, Sequence[str]], qrels: Mapping[str, Sequence[str]], k: int) -> float:
    """Mean over queries of the reciprocal rank of the first relevant doc
    within the top k (0 when none appears)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not run:
        raise ValueError("empty run")
    total = 0.0
    for qid, ranked in run.items():
        if qid not in qrels:
            raise ValueError(f"query {qid} missing from qrels")
        total += _reciprocal_rank(ranked, set(qrels[qid]), k)
    return total / len(run)


def recall_at_k(
    run: Mapping[str, Sequence[str]], qrels: Mapping[str, Sequence[str]], k: int
) -> float:
    """Macro average over queries of |relevant in top k| / |relevant|."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not run:
        raise ValueError("empty run")
    total = 0.0
    for qid, ranked in run.items():
        if qid not in qrels:
            raise ValueError(f"query {qid} missing from qrels")
        relevant = set(qrels[qid])
        if not relevant:
            raise ValueError(f"query {qid} has an empty relevant set")
        hits = sum(1 for doc_id in ranked[:k] if doc_id in relevant)
        total += hits / len(relevant)
    return total / len(run)


@dataclass
class EvalReport:
    """Metric values keyed like 'mrr@10', plus per-query diagnostics."""

    values: dict[str, float]
    query_count: int
    per_query: dict[str, dict[str, float]]


def evaluate(
    run: Mapping[str, Sequence[str]],
    qrels: Mapping[str, Sequence[str]],
    metrics: Sequence[str],
) -> EvalReport:
    if not metrics:
        raise ValueError("no metrics requested")
    parsed = [(spec, *parse_metric(spec)) for spec in metrics]
    values: dict[str, float] = {}
    per_query: dict[str, dict[str, float]] = {}
    for spec, name, k in parsed:
        key = f"{name}@{k}"
        if name == "mrr":
            values[key] = mrr_at_k(run, qrels, k)
        else:
            values[key] = recall_at_k(run, qrels, k)
        for qid, ranked in run.items():
            relevant = set(qrels[qid])
            if name == "mrr":
                q_value = _reciprocal_rank(ranked, relevant, k)
            else:
                q_value = sum(1 for d in ranked[:k] if d in relevant) / len(relevant)
            per_query.setdefault(qid, {})[key] = q_value
    return EvalReport(values=values, query_count=len(run), per_query=per_query)


def write_run(path: str | Path, ranked: Mapping[str, Sequence[tuple[str, float]]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, entries in ranked.items():
            for rank, (doc_id, score) in enumerate(entries, start=1):
                fh.write(f"{qid}\t{doc_id}\t{rank}\t{score:.6f}\n")


def load_run(path: str | Path) -> dict[str, list[str]]:
    run: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}"
                )
            qid, doc_id, rank_str, score_str = parts
            try:
                rank = int(rank_str)
                float(score_str)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: bad rank or score") from exc
            ranked = run.setdefault(qid, [])
            if rank != len(ranked) + 1:
                raise DataFormatError(
                    f"{path}:{lineno}: rank {rank} out of order for query {qid}"
                )
            if doc_id in ranked:
                raise DataFormatError(f"{path}:{lineno}: duplicate doc {doc_id} for {qid}")
            ranked.append(doc_id)
    return run


def format_report_table(report: EvalReport) -> str:
    width = max(len(key) for key in report.values)
    lines = [f"queries: {report.query_count}"]
    lines += [f"{key.ljust(width)}  {value:.4f}" for key, value in report.values.items()]
    return "\n".join(lines)


def write_report(report: EvalReport, text_path: str | Path, kv_path: str | Path) -> None:
    """Human-readable table plus machine-readable key-value TSV records."""
    Path(text_path).write_text(format_report_table(report) + "\n", encoding="utf-8")
    with open(kv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"query_count\t{report.query_count}\n")
        for key, value in report.values.items():
            fh.write(f"{key}\t{value}\n")
