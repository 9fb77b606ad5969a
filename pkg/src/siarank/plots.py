"""Figure rendering for CLI reports; every plot lands next to its TSV."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

FIG_SIZE = (6.4, 4.0)


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_epoch_history(history, path: str | Path, title: str = "training") -> Path:
    """Training loss and dev P@10 per epoch on twin axes."""
    epochs = [row.epoch for row in history]
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    ax.plot(epochs, [row.train_loss for row in history], "o-", color="tab:blue",
            label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss", color="tab:blue")
    twin = ax.twinx()
    twin.plot(epochs, [row.dev_p10 for row in history], "s--", color="tab:red",
              label="dev P@10")
    twin.set_ylabel("dev P@10 (%)", color="tab:red")
    ax.set_title(title)
    return _finish(fig, path)


def plot_volume_curve(rows, path: str | Path) -> Path:
    """P@10 against training-set size (standalone and with GBRT)."""
    sizes = [row["size"] for row in rows]
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    ax.errorbar(sizes, [row["standalone_mean"] for row in rows],
                yerr=[row["standalone_std"] for row in rows],
                fmt="o-", capsize=3, label="standalone")
    if "gbrt_mean" in rows[0]:
        ax.errorbar(sizes, [row["gbrt_mean"] for row in rows],
                    yerr=[row["gbrt_std"] for row in rows],
                    fmt="s--", capsize=3, label="with GBRT")
    ax.set_xscale("log")
    ax.set_xlabel("training pairs")
    ax.set_ylabel("P@10 (%)")
    ax.set_title("training data volume")
    ax.legend()
    return _finish(fig, path)


def plot_interaction_comparison(rows, path: str | Path) -> Path:
    """Mean +/- std P@10 per interaction variant."""
    names = [row["variant"] for row in rows]
    means = [row["standalone_mean"] for row in rows]
    stds = [row["standalone_std"] for row in rows]
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    ax.bar(range(len(names)), means, yerr=stds, capsize=4, color="tab:blue")
    ax.set_xticks(range(len(names)), names, rotation=20, ha="right")
    ax.set_ylabel("standalone P@10 (%)")
    lo = min(m - s for m, s in zip(means, stds))
    hi = max(m + s for m, s in zip(means, stds))
    margin = max(1.0, 0.1 * (hi - lo))
    ax.set_ylim(max(0.0, lo - margin), min(100.0, hi + margin))
    ax.set_title("interaction module variants")
    return _finish(fig, path)


def plot_parts_comparison(rows, path: str | Path) -> Path:
    """P@10 for single and cumulative document-part subsets."""
    names = [row["parts"] for row in rows]
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    ax.bar(range(len(names)), [row["standalone"] for row in rows], color="tab:green")
    ax.set_xticks(range(len(names)), names, rotation=20, ha="right")
    ax.set_ylabel("standalone P@10 (%)")
    ax.set_title("document part ablation")
    return _finish(fig, path)


def plot_latency(rows, path: str | Path) -> Path:
    """Per-operation latency bars (log scale) for each benchmarked size."""
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    metrics = [
        ("query embed", "query_embed_us"),
        ("interaction", "interaction_us"),
        ("interaction u8", "quant_interaction_us"),
        ("cross-encoder", "cross_us"),
    ]
    width = 0.8 / len(rows)
    for k, row in enumerate(rows):
        values = [getattr(row, attr) for _, attr in metrics]
        offsets = [i + k * width for i in range(len(metrics))]
        ax.bar(offsets, values, width=width, label=row.label)
    ax.set_yscale("log")
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(metrics))],
                  [name for name, _ in metrics])
    ax.set_ylabel("wall time per call (us)")
    ax.set_title("latency micro-benchmark")
    ax.legend()
    return _finish(fig, path)


def plot_per_query_histogram(report, path: str | Path) -> Path:
    """Distribution of per-query P@10 in an evaluation report."""
    values = [row[1] for row in report.per_query]
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    ax.hist(values, bins=11, range=(0, 110), color="tab:purple", edgecolor="black")
    ax.set_xlabel("per-query P@10 (%)")
    ax.set_ylabel("queries")
    ax.set_title(f"mean P@10 = {report.p_at_10:.2f} over {report.n_queries} queries")
    return _finish(fig, path)
