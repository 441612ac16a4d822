"""Figures written next to the CSV outputs (Agg backend, files only)."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .model import SOURCES  # noqa: E402

COLORS = {"vocals": "#d62728", "drums": "#1f77b4", "bass": "#2ca02c", "other": "#9467bd"}


def _finish(fig, ax, path):
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_loss_curves(logs, path):
    """Train (dashed) and validation (solid) L1 loss per task against epoch."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for lg in logs:
        epochs = [r.epoch for r in lg.records]
        tasks = list(lg.records[0].train_loss) if lg.records else []
        for t in tasks:
            c = COLORS.get(t)
            ax.plot(epochs, [r.train_loss[t] for r in lg.records], "--", color=c, alpha=0.6)
            ax.plot(epochs, [r.val_loss.get(t, np.nan) for r in lg.records], "-", color=c, label=t)
        if lg.best_epoch is not None:
            ax.axvline(lg.best_epoch, color="0.6", lw=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("L1 loss (normalized magnitude)")
    ax.legend(frameon=False, fontsize=8)
    return _finish(fig, ax, path)


def read_summary_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (v if k == "method" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def plot_scores(rows: list[dict], path):
    """Grouped SDR and SIR bars, one group per source, one bar per method row."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.8), sharey=False)
    x = np.arange(len(SOURCES))
    width = 0.8 / max(1, len(rows))
    for ax, metric in zip(axes, ("SDR", "SIR")):
        for i, row in enumerate(rows):
            vals = [row.get(f"{s}_{metric}", np.nan) for s in SOURCES]
            ax.bar(x + (i - (len(rows) - 1) / 2) * width, vals, width, label=row["method"])
        ax.set_xticks(x, [s.capitalize() for s in SOURCES])
        ax.set_ylabel(f"{metric} in dB")
        ax.axhline(0, color="0.3", lw=0.6)
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    axes[0].legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def write_comparison(rows: list[dict], out_dir) -> tuple[Path, Path]:
    """Stack several summary rows into one CSV and one bar chart."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = ["method"] + [f"{s}_{m}" for m in ("SDR", "SIR") for s in SOURCES]
    csv_path = out_dir / "comparison.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([row["method"], *(f"{row.get(c, float('nan')):.4f}" for c in cols[1:])])
    return csv_path, plot_scores(rows, out_dir / "comparison.png")
