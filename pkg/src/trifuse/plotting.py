"""Matplotlib figures for training logs, fold reports and ablation tables."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["plot_training", "plot_fold_reports", "plot_ablation"]

# no Software/date metadata, so identical inputs give identical bytes
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_training(log: list, path) -> Path:
    """Train loss and validation metric per epoch, on twin axes."""
    metric = next(k for k in log[0] if k.startswith("val_"))
    epochs = [r["epoch"] for r in log]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(epochs, [r["train_loss"] for r in log], color="tab:blue", marker=".")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r[metric] for r in log], color="tab:orange", marker=".")
    ax2.set_ylabel(metric.replace("_", " "), color="tab:orange")
    best = max(log, key=lambda r: r[metric])
    ax2.axvline(best["epoch"], color="grey", lw=0.8, ls="--")
    return _save(fig, path)


def plot_fold_reports(reports: dict, path) -> Path:
    """One panel per dataset: fold scores as bars, the mean as a line."""
    fig, axes = plt.subplots(1, len(reports), figsize=(4 * len(reports), 3.2), squeeze=False)
    for ax, (name, rep) in zip(axes[0], reports.items()):
        folds = range(1, len(rep.folds) + 1)
        ax.bar(folds, rep.folds, color="tab:blue", alpha=0.7)
        ax.axhline(rep.mean, color="tab:red", lw=1.2, label=f"mean {rep.mean:.5f}")
        lo, hi = min(rep.folds), max(rep.folds)
        pad = max(hi - lo, 1e-3)
        ax.set_ylim(lo - pad, hi + pad)
        ax.set_xticks(list(folds))
        ax.set_xlabel("fold")
        ax.set_ylabel(rep.metric)
        ax.set_title(name)
        ax.legend(loc="lower right", fontsize=8)
    return _save(fig, path)


def plot_ablation(table: dict, path) -> Path:
    """Mean score per model variant with the individual seed runs overlaid."""
    modes = list(table["modes"])
    fig, ax = plt.subplots(figsize=(1.2 * len(modes) + 2, 3.5))
    means = [table["modes"][m]["mean"] for m in modes]
    ax.bar(modes, means, color="tab:green", alpha=0.7)
    for x, m in enumerate(modes):
        runs = [r["score"] for r in table["modes"][m]["runs"]]
        ax.scatter([x] * len(runs), runs, color="black", s=12, zorder=3)
    ax.set_ylabel(table["metric"])
    ax.set_ylim(0, 1.02)
    return _save(fig, path)
