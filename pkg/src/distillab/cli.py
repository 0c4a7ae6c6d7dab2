"""Command-line pipeline: synthetic data generation, training with ablation
modes, corpus encoding, top-k search, evaluation, and latency measurement.

Stages communicate only through files. Tunable keys resolve with precedence
flag > DISTILLAB_SEED (seed only) > config file > built-in default; unknown
config-file keys are rejected. Exit codes: 0 success, 1 usage error, 2 data
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from . import data as data_mod
from . import metrics as metrics_mod
from .checkpoint import load_retriever
from .search import build_index, load_index, measure_latency, save_index, search as run_search
from .encoder import EncoderConfig
from .errors import DataFormatError, DivergenceError, NonFiniteLossError
from .training import MODES, TrainConfig, fit, write_history

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

SEED_ENV_VAR = "DISTILLAB_SEED"

STAGE_SEED_OFFSETS = {
    "gen-data": 101,
    "train": 211,
    "encode": 307,
    "search": 401,
    "eval": 503,
    "latency": 601,
}

DEFAULTS: dict[str, object] = {
    "seed": 0,
    # synthetic data generation
    "num_docs": 500,
    "train_queries": 100,
    "heldout_queries": 25,
    "synthetic_vocab": 150,
    "doc_len": 12,
    "query_len": 6,
    # tokenization / grouping
    "vocab_min_freq": 1,
    "max_len_query": 8,
    "max_len_doc": 16,
    "group_size": 8,
    "heldout_group_size": 20,
    # training
    "mode": "full",
    "epochs": 2,
    "batch_size": 8,
    "lr_retriever": 1e-3,
    "lr_ranker": 1e-3,
    "warmup_ratio": 0.1,
    "weight_decay": 0.01,
    "distill_temperature": 1.0,
    "teacher_renorm": True,
    "checkpoint_every": 0,
    "weight_de": 1.0,
    "weight_ce": 1.0,
    "weight_sent": 1.0,
    "weight_word": 1.0,
    "retriever_layers": 1,
    "retriever_heads": 4,
    "retriever_dim": 64,
    "retriever_ff": 128,
    "retriever_dropout": 0.0,
    "ranker_layers": 2,
    "ranker_heads": 4,
    "ranker_dim": 64,
    "ranker_ff": 128,
    "ranker_dropout": 0.0,
    # search / eval / latency
    "k": 10,
    "metrics": "mrr@10,recall@50",
    "repetitions": 3,
    "latency_queries": 100,
}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Merged view of built-in defaults, config-file keys, the seed
    environment variable, and flag overrides, with per-key provenance."""

    values: dict[str, object]
    provenance: dict[str, str]

    def __getitem__(self, key: str):
        return self.values[key]


def _coerce(key: str, value, default) -> object:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise UsageError(f"config key {key!r} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise UsageError(f"config key {key!r} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise UsageError(f"config key {key!r} must be a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise UsageError(f"config key {key!r} must be a string, got {value!r}")
    return value


def resolve_run_config(
    config_path: str | None,
    flag_values: Mapping[str, object],
    env: Mapping[str, str] | None = None,
) -> RunConfig:
    env = os.environ if env is None else env
    file_cfg: dict = {}
    if config_path is not None:
        try:
            file_cfg = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{config_path}: invalid JSON ({exc})") from exc
        if not isinstance(file_cfg, dict):
            raise DataFormatError(f"{config_path}: config must be a JSON object")
        for key in file_cfg:
            if key not in DEFAULTS:
                raise UsageError(f"unknown config key {key!r}")
    values: dict[str, object] = {}
    provenance: dict[str, str] = {}
    for key, default in DEFAULTS.items():
        flag = flag_values.get(key)
        if flag is not None:
            values[key], provenance[key] = flag, "flag"
        elif key == "seed" and SEED_ENV_VAR in env:
            try:
                values[key] = int(env[SEED_ENV_VAR])
            except ValueError as exc:
                raise UsageError(f"{SEED_ENV_VAR} must be an integer") from exc
            provenance[key] = "env"
        elif key in file_cfg:
            values[key], provenance[key] = _coerce(key, file_cfg[key], default), "file"
        else:
            values[key], provenance[key] = default, "default"
    return RunConfig(values, provenance)


def stage_seed(master_seed: int, stage: str) -> int:
    return master_seed + STAGE_SEED_OFFSETS[stage]


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_help(flag: str) -> str:
    key = flag.replace("-", "_")
    return f"default {DEFAULTS[key]}"


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help=_default_help("seed"))


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=MODES, help=_default_help("mode"))
    for name in ("epochs", "batch-size", "group-size", "heldout-group-size",
                 "checkpoint-every", "max-len-query", "max-len-doc", "vocab-min-freq"):
        p.add_argument(f"--{name}", type=int, help=_default_help(name))
    for name in ("lr-retriever", "lr-ranker", "warmup-ratio", "weight-decay",
                 "distill-temperature", "weight-de", "weight-ce", "weight-sent",
                 "weight-word"):
        p.add_argument(f"--{name}", type=float, help=_default_help(name))
    p.add_argument("--teacher-renorm", action=argparse.BooleanOptionalAction, default=None,
                   help=_default_help("teacher-renorm"))
    for tower in ("retriever", "ranker"):
        for name, typ in (("layers", int), ("heads", int), ("dim", int), ("ff", int)):
            p.add_argument(f"--{tower}-{name}", type=typ, help=_default_help(f"{tower}-{name}"))
        p.add_argument(f"--{tower}-dropout", type=float, help=_default_help(f"{tower}-dropout"))


def build_parser() -> _Parser:
    parser = _Parser(prog="distillab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="write a synthetic corpus and splits")
    _add_common(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true", help="overwrite existing files")
    for name in ("num-docs", "train-queries", "heldout-queries", "synthetic-vocab",
                 "doc-len", "query-len"):
        p.add_argument(f"--{name}", type=int, help=_default_help(name))

    p = sub.add_parser("train", help="train retriever and ranker")
    _add_common(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-figures", action="store_true")
    _add_train_flags(p)

    p = sub.add_parser("encode", help="encode the corpus into an embedding index")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-len-doc", type=int, help=_default_help("max-len-doc"))

    p = sub.add_parser("search", help="answer queries from an index, writing a run file")
    _add_common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--qids", help="optional file restricting which query ids to search")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, help=_default_help("k"))
    p.add_argument("--max-len-query", type=int, help=_default_help("max-len-query"))

    p = sub.add_parser("eval", help="score a run file against qrels")
    _add_common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--metrics", help=_default_help("metrics"))
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("latency", help="time the query path")
    _add_common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--k", type=int, help=_default_help("k"))
    p.add_argument("--repetitions", type=int, help=_default_help("repetitions"))
    p.add_argument("--latency-queries", type=int, help=_default_help("latency-queries"))
    p.add_argument("--max-len-query", type=int, help=_default_help("max-len-query"))
    p.add_argument("--no-figures", action="store_true")
    return parser


def _flags_dict(args: argparse.Namespace) -> dict[str, object]:
    return {k: v for k, v in vars(args).items() if k in DEFAULTS}


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = resolve_run_config(args.config, _flags_dict(args))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    targets = {
        name: out / name
        for name in ("corpus.tsv", "queries.tsv", "qrels.tsv", "train_qids.txt", "heldout_qids.txt")
    }
    if not args.force:
        existing = [str(p) for p in targets.values() if p.exists()]
        if existing:
            raise DataFormatError(
                f"refusing to overwrite existing files (use --force): {', '.join(existing)}"
            )
    num_queries = cfg["train_queries"] + cfg["heldout_queries"]
    store, queries, qrels = data_mod.gen_synthetic(
        num_docs=cfg["num_docs"],
        num_queries=num_queries,
        vocab_size=cfg["synthetic_vocab"],
        doc_len=cfg["doc_len"],
        query_len=cfg["query_len"],
        seed=stage_seed(cfg["seed"], "gen-data"),
    )
    train, heldout = data_mod.split_queries(queries, cfg["train_queries"], cfg["heldout_queries"])
    data_mod.save_corpus(targets["corpus.tsv"], store)
    data_mod.save_queries(targets["queries.tsv"], queries)
    data_mod.save_qrels(targets["qrels.tsv"], qrels)
    data_mod.save_qids(targets["train_qids.txt"], list(train))
    data_mod.save_qids(targets["heldout_qids.txt"], list(heldout))
    print(
        f"gen-data: {len(store)} docs, {len(train)} train / {len(heldout)} held-out "
        f"queries -> {out}"
    )
    return EXIT_OK


def _encoder_configs(cfg: RunConfig, vocab_size: int, seed: int) -> tuple[EncoderConfig, EncoderConfig]:
    retriever = EncoderConfig(
        vocab_size=vocab_size,
        hidden_dim=cfg["retriever_dim"],
        num_layers=cfg["retriever_layers"],
        num_heads=cfg["retriever_heads"],
        feedforward_dim=cfg["retriever_ff"],
        max_position=max(cfg["max_len_query"], cfg["max_len_doc"]) + 2,
        dropout_rate=cfg["retriever_dropout"],
        seed=seed,
    )
    ranker = EncoderConfig(
        vocab_size=vocab_size,
        hidden_dim=cfg["ranker_dim"],
        num_layers=cfg["ranker_layers"],
        num_heads=cfg["ranker_heads"],
        feedforward_dim=cfg["ranker_ff"],
        max_position=cfg["max_len_query"] + cfg["max_len_doc"] + 3,
        dropout_rate=cfg["ranker_dropout"],
        seed=seed + 1,
    )
    return retriever, ranker


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_run_config(args.config, _flags_dict(args))
    data_dir = Path(args.data_dir)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    store = data_mod.load_corpus(data_dir / "corpus.tsv")
    queries = data_mod.load_queries(data_dir / "queries.tsv")
    qrels = data_mod.load_qrels(data_dir / "qrels.tsv")
    train_qids = data_mod.load_qids(data_dir / "train_qids.txt")
    heldout_qids = data_mod.load_qids(data_dir / "heldout_qids.txt")
    missing = [q for q in train_qids + heldout_qids if q not in queries]
    if missing:
        raise DataFormatError(f"split query ids missing from queries.tsv: {missing[:5]}")
    train_queries = {q: queries[q] for q in train_qids}
    heldout_queries = {q: queries[q] for q in heldout_qids}

    vocab = data_mod.build_vocab(store, train_queries.values(), cfg["vocab_min_freq"])
    data_mod.save_vocab(out / "vocab.tsv", vocab)

    seed = stage_seed(cfg["seed"], "train")
    train_groups = data_mod.build_train_groups(
        train_queries, qrels, store, vocab, cfg["group_size"], seed,
        cfg["max_len_query"], cfg["max_len_doc"],
    )
    heldout_groups = data_mod.build_train_groups(
        heldout_queries, qrels, store, vocab, cfg["heldout_group_size"], seed + 1,
        cfg["max_len_query"], cfg["max_len_doc"],
    )

    retriever_cfg, ranker_cfg = _encoder_configs(cfg, vocab.size, seed)
    train_config = TrainConfig(
        retriever_config=retriever_cfg,
        ranker_config=ranker_cfg,
        mode=cfg["mode"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        group_size=cfg["group_size"],
        lr_retriever=cfg["lr_retriever"],
        lr_ranker=cfg["lr_ranker"],
        warmup_ratio=cfg["warmup_ratio"],
        weight_decay=cfg["weight_decay"],
        distill_temperature=cfg["distill_temperature"],
        seed=seed,
        teacher_renorm=cfg["teacher_renorm"],
        checkpoint_every=cfg["checkpoint_every"],
        weight_de=cfg["weight_de"],
        weight_ce=cfg["weight_ce"],
        weight_sent=cfg["weight_sent"],
        weight_word=cfg["weight_word"],
    )
    result = fit(train_config, train_groups, heldout_groups, out)
    write_history(result.history, out / "history.tsv")
    if not args.no_figures:
        from .report import save_training_figure

        (out / "figures").mkdir(exist_ok=True)
        save_training_figure(result.history, out / "figures" / "training_curves.png")
    final = result.history.records[-1].heldout_mrr10 if result.history.records else float("nan")
    print(
        f"train[{cfg['mode']}]: {cfg['epochs']} epochs, "
        f"baseline MRR@10 {result.history.baseline_mrr10:.4f} -> final {final:.4f}, "
        f"checkpoints in {out}"
    )
    return EXIT_OK


def cmd_encode(args: argparse.Namespace) -> int:
    cfg = resolve_run_config(args.config, _flags_dict(args))
    store = data_mod.load_corpus(args.corpus)
    vocab = data_mod.load_vocab(args.vocab)
    index = build_index(args.checkpoint, store, vocab, cfg["max_len_doc"])
    save_index(index, args.out)
    print(f"encode: {len(index)} docs x dim {index.dim} -> {args.out}")
    return EXIT_OK


def _load_search_inputs(args):
    index = load_index(args.index)
    retriever, _, checksum = load_retriever(args.checkpoint)
    if index.metadata.get("checkpoint_checksum") not in (None, checksum):
        raise DataFormatError(
            f"{args.index} was built with a different retriever checkpoint"
        )
    vocab = data_mod.load_vocab(args.vocab)
    queries = data_mod.load_queries(args.queries)
    return index, retriever, vocab, queries


def cmd_search(args: argparse.Namespace) -> int:
    cfg = resolve_run_config(args.config, _flags_dict(args))
    index, retriever, vocab, queries = _load_search_inputs(args)
    if args.qids:
        keep = data_mod.load_qids(args.qids)
        missing = [q for q in keep if q not in queries]
        if missing:
            raise DataFormatError(f"qids missing from queries file: {missing[:5]}")
        queries = {q: queries[q] for q in keep}
    ranked = {}
    for qid, text in queries.items():
        result = run_search(index, text, retriever, vocab, cfg["k"], cfg["max_len_query"])
        ranked[qid] = result.results
    metrics_mod.write_run(args.out, ranked)
    print(f"search: {len(ranked)} queries, top-{cfg['k']} -> {args.out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_run_config(args.config, _flags_dict(args))
    run = metrics_mod.load_run(args.run)
    qrels = data_mod.load_qrels(args.qrels)
    metric_list = [m.strip() for m in cfg["metrics"].split(",") if m.strip()]
    report = metrics_mod.evaluate(run, qrels, metric_list)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_mod.write_report(report, out / "report.txt", out / "report.tsv")
    if not args.no_figures:
        from .report import save_metrics_figure

        (out / "figures").mkdir(exist_ok=True)
        save_metrics_figure(report, out / "figures" / "metrics.png")
    print(metrics_mod.format_report_table(report))
    return EXIT_OK


def cmd_latency(args: argparse.Namespace) -> int:
    cfg = resolve_run_config(args.config, _flags_dict(args))
    index, retriever, vocab, queries = _load_search_inputs(args)
    rng = random.Random(stage_seed(cfg["seed"], "latency"))
    qids = list(queries)
    count = min(cfg["latency_queries"], len(qids))
    sample = rng.sample(qids, count)
    stats = measure_latency(
        index,
        [queries[q] for q in sample],
        retriever,
        vocab,
        cfg["k"],
        cfg["repetitions"],
        cfg["max_len_query"],
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "latency.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("query_id\tmean_us\n")
        for qid, us in zip(sample, stats.per_query_us):
            fh.write(f"{qid}\t{us:.3f}\n")
    with open(out / "latency_summary.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"queries\t{count}\n")
        fh.write(f"repetitions\t{cfg['repetitions']}\n")
        fh.write(f"mean_us\t{stats.mean_us:.3f}\n")
        fh.write(f"p50_us\t{stats.p50_us:.3f}\n")
        fh.write(f"p95_us\t{stats.p95_us:.3f}\n")
    if not args.no_figures:
        from .report import save_latency_figure

        (out / "figures").mkdir(exist_ok=True)
        save_latency_figure(stats, out / "figures" / "latency_hist.png")
    print(
        f"latency: {count} queries, k={cfg['k']}: mean {stats.mean_us:.0f}us, "
        f"p50 {stats.p50_us:.0f}us, p95 {stats.p95_us:.0f}us"
    )
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "encode": cmd_encode,
    "search": cmd_search,
    "eval": cmd_eval,
    "latency": cmd_latency,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"distillab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, DivergenceError) as exc:
        print(f"distillab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, OSError) as exc:
        print(f"distillab: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"distillab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
