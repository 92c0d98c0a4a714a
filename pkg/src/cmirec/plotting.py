"""Figures written next to the tab-separated reports."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training_curves(history, path):
    """Loss components and validation Recall@50 per epoch."""
    epochs = [r.epoch for r in history if not math.isnan(r.total)]
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(9, 3.5))
    for name in ("main", "contrastive", "orthogonality", "total"):
        values = [getattr(r, name) for r in history if not math.isnan(r.total)]
        ax_loss.plot(epochs, values, marker="o", ms=3, label=name)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.set_yscale("symlog", linthresh=1e-3)
    ax_loss.legend(fontsize=8)
    ax_val.plot([r.epoch for r in history], [r.val_recall for r in history], marker="o", ms=3,
                color="k")
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel("validation Recall@50")
    return _finish(fig, path)


def plot_metrics(report, path, baseline=None, label="model"):
    ks = sorted(report.recall)
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    width = 0.38 if baseline is not None else 0.6
    for ax, metric in zip(axes, ("recall", "hitrate")):
        xs = range(len(ks))
        ours = [getattr(report, metric)[k] for k in ks]
        ax.bar([x - (width / 2 if baseline else 0) for x in xs], ours, width, label=label)
        if baseline is not None:
            base = [getattr(baseline, metric)[k] for k in ks]
            ax.bar([x + width / 2 for x in xs], base, width, label="popularity")
        ax.set_xticks(list(xs))
        ax.set_xticklabels([f"@{k}" for k in ks])
        ax.set_title(metric.capitalize())
        ax.set_ylim(0, max(1e-3, max(ours + (base if baseline is not None else []))) * 1.15)
    axes[0].legend(fontsize=8)
    return _finish(fig, path)


def plot_interest_sweep(results, path, k=50):
    """Recall@k against the number of interests; ``results`` maps m -> MetricsReport."""
    ms = sorted(results)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(ms, [results[m].recall[k] for m in ms], marker="o", label=f"Recall@{k}")
    ax.plot(ms, [results[m].hitrate[k] for m in ms], marker="s", label=f"HitRate@{k}")
    ax.set_xscale("log", base=2)
    ax.set_xticks(ms)
    ax.set_xticklabels([str(m) for m in ms])
    ax.set_xlabel("number of interests")
    ax.legend(fontsize=8)
    return _finish(fig, path)
