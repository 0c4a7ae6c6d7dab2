"""Figure rendering for the CLI report paths. Every figure is written next
to the delimited output it illustrates."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_training_figure(history, path: str | Path) -> None:
    """Loss components and held-out MRR@10 per epoch."""
    records = history.records
    fig, (ax_loss, ax_mrr) = plt.subplots(1, 2, figsize=(10, 4))
    if records:
        epochs = [r.epoch for r in records]
        for name in ("l_de", "l_ce", "l_sent", "l_word"):
            ax_loss.plot(epochs, [getattr(r, name) for r in records], label=name)
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("mean loss")
        ax_loss.legend()
        ax_mrr.plot(epochs, [r.heldout_mrr10 for r in records], marker="o")
        ax_mrr.axhline(history.baseline_mrr10, linestyle="--", color="gray", label="epoch 0")
        ax_mrr.set_xlabel("epoch")
        ax_mrr.set_ylabel("held-out MRR@10")
        ax_mrr.legend()
    else:
        ax_loss.text(0.5, 0.5, "no epochs", ha="center")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_metrics_figure(report, path: str | Path) -> None:
    """Bar chart of the evaluation report values."""
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(report.values), 3.6))
    keys = list(report.values)
    vals = [report.values[k] for k in keys]
    ax.bar(range(len(keys)), vals, color="steelblue")
    ax.set_xticks(range(len(keys)), keys, rotation=20)
    ax.set_ylim(0, 1.05)
    for i, v in enumerate(vals):
        ax.text(i, v + 0.02, f"{v:.3f}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_latency_figure(stats, path: str | Path) -> None:
    """Histogram of per-query latencies with p50/p95 markers."""
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.hist(stats.per_query_us, bins=30, color="steelblue")
    ax.axvline(stats.p50_us, color="black", linestyle="--", label=f"p50 {stats.p50_us:.0f}us")
    ax.axvline(stats.p95_us, color="firebrick", linestyle="--", label=f"p95 {stats.p95_us:.0f}us")
    ax.set_xlabel("latency per query (us)")
    ax.set_ylabel("queries")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
