"""Figure rendering for the CLI report paths. Figures are companions to the
delimited outputs, never a primary artifact."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import METRIC_KEYS, EvalReport


def plot_loss_curves(metrics: list[dict], path: str | Path) -> None:
    """Per-epoch training losses from the metrics JSONL records."""
    epochs = [m["epoch"] for m in metrics]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [m["loss_total"] for m in metrics], label="total", marker="o")
    ax.plot(epochs, [m["loss_im"] for m in metrics], label="masked recovery", marker="s")
    if metrics and "loss_ex" in metrics[0]:
        ax.plot(epochs, [m["loss_ex"] for m in metrics], label="neighborhood", marker="^")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_eval_report(report: EvalReport, path: str | Path) -> None:
    """Bar chart of the four accuracy metrics with std over mask seeds."""
    means = [report.mean[m] for m in METRIC_KEYS]
    stds = [report.std[m] for m in METRIC_KEYS]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(METRIC_KEYS)), means, yerr=stds, capsize=4,
           color=["#4878d0", "#4878d0", "#ee854a", "#ee854a"])
    ax.set_xticks(range(len(METRIC_KEYS)))
    ax.set_xticklabels(["top-1", "top-5", "top-1\nw/ depth", "top-5\nw/ depth"])
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation(reports: dict[str, EvalReport], path: str | Path) -> None:
    """Grouped bars comparing the ablation rows across all four metrics."""
    labels = list(reports)
    width = 0.8 / len(labels)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for j, label in enumerate(labels):
        rep = reports[label]
        xs = [i + j * width for i in range(len(METRIC_KEYS))]
        ax.bar(xs, [rep.mean[m] for m in METRIC_KEYS],
               yerr=[rep.std[m] for m in METRIC_KEYS],
               width=width, capsize=3, label=label)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(METRIC_KEYS))])
    ax.set_xticklabels(["top-1", "top-5", "top-1 w/ depth", "top-5 w/ depth"])
    ax.set_ylabel("accuracy (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
