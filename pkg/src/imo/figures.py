"""Matplotlib renderings of training runs and analysis reports.

Every function takes already-computed data plus an output path, writes
one PNG, closes its figure, and returns the path.  The Agg backend is
forced so rendering works on headless machines; nothing here ever opens
a window.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .analysis import SimilarityTable
from .encoder import Model

DPI = 150


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def training_curves(metrics_rows: Sequence[dict], path: str | Path) -> Path:
    """Loss over epochs, one line per (stage, metric), with the per-stage
    validation score marked at the stage boundary."""
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(9, 3.5))
    stages = sorted({row["stage"] for row in metrics_rows if row["stage"] is not None})
    for stage in stages:
        for metric in ("loss", "ce"):
            pts = [(row["epoch"], row["value"]) for row in metrics_rows
                   if row["stage"] == stage and row["metric_name"] == metric
                   and row["split"] == "train" and row["epoch"] is not None]
            if pts:
                xs, ys = zip(*sorted(pts))
                ax_loss.plot(xs, ys, marker="o", markersize=3,
                             label=f"stage {stage} {metric}")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    if ax_loss.lines:
        ax_loss.legend(fontsize=7)

    vals = [(row["stage"], row["value"]) for row in metrics_rows
            if row["split"] == "val" and row["stage"] is not None
            and row["epoch"] is not None]
    if vals:
        xs, ys = zip(*sorted(vals))
        ax_val.plot(xs, ys, marker="s", color="tab:green")
    ax_val.set_xlabel("stage")
    ax_val.set_ylabel("validation score")
    if stages:
        ax_val.set_xticks(stages)
    return _finish(fig, path)


def mask_heatmap(model: Model, path: str | Path) -> Path:
    """Filtering vectors of every mask as one heatmap row each, with the
    pruned entries rendered at exactly zero."""
    filters = model.mask_filters()
    if not filters:
        raise ValueError("model has no masks to draw")
    grid = np.stack([f.filtering_values() for f in filters])
    labels = [f"layer {f.layer_index}" + (f" / slot {i}" if len(filters) > model.config.n_layers else "")
              for i, f in enumerate(filters)]
    fig, ax = plt.subplots(figsize=(8, 0.6 * len(filters) + 1.2))
    limit = max(np.abs(grid).max(), 1e-12)
    image = ax.imshow(grid, aspect="auto", cmap="RdBu_r", vmin=-limit, vmax=limit)
    ax.set_yticks(range(len(filters)), labels=labels, fontsize=7)
    ax.set_xlabel("feature dimension")
    fig.colorbar(image, ax=ax, label="m value")
    return _finish(fig, path)


def similarity_heatmap(table: SimilarityTable, path: str | Path) -> Path:
    """Cosine and Jaccard agreement per mask slot as an annotated grid."""
    rows = table.rows
    grid = np.array([[row.cosine for row in rows], [row.jaccard for row in rows]])
    fig, ax = plt.subplots(figsize=(1.1 * len(rows) + 2.0, 2.6))
    image = ax.imshow(grid, cmap="viridis", vmin=-1.0, vmax=1.0, aspect="auto")
    ax.set_xticks(range(len(rows)),
                  labels=[f"layer {row.layer}\nslot {row.slot}" for row in rows],
                  fontsize=7)
    ax.set_yticks([0, 1], labels=["cosine(m)", "jaccard(q)"], fontsize=8)
    for j, row in enumerate(rows):
        ax.text(j, 0, f"{row.cosine:.2f}", ha="center", va="center", fontsize=7,
                color="white")
        ax.text(j, 1, f"{row.jaccard:.2f}", ha="center", va="center", fontsize=7,
                color="white")
    fig.colorbar(image, ax=ax)
    return _finish(fig, path)


def ablation_bars(rows: Sequence[dict], path: str | Path,
                  domain: str = "target_b") -> Path:
    """Mean accuracy per ablation variant on one evaluation domain, with
    a whisker spanning one standard deviation across seeds."""
    variants = list(dict.fromkeys(row["variant"] for row in rows))
    means, spreads = [], []
    for variant in variants:
        vals = [row["value"] for row in rows
                if row["variant"] == variant and row["domain"] == domain]
        if not vals:
            raise ValueError(f"no rows for variant {variant!r} on domain {domain!r}")
        means.append(float(np.mean(vals)))
        spreads.append(float(np.std(vals)))
    fig, ax = plt.subplots(figsize=(0.8 * len(variants) + 2.0, 3.2))
    ax.bar(range(len(variants)), means, yerr=spreads, capsize=3, color="tab:blue")
    ax.set_xticks(range(len(variants)), labels=variants, rotation=30,
                  ha="right", fontsize=8)
    ax.set_ylabel(f"accuracy on {domain}")
    ax.set_ylim(0.0, 1.0)
    ax.axhline(0.5, color="gray", linestyle=":", linewidth=1)
    return _finish(fig, path)


def size_sweep_curves(rows: Sequence[dict], path: str | Path,
                      domain: str = "target_b") -> Path:
    """Accuracy against training-set size, one line per arm, log-x."""
    arms = list(dict.fromkeys(row["arm"] for row in rows))
    sizes = sorted({row["size"] for row in rows})
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for arm in arms:
        means = []
        for size in sizes:
            vals = [row["value"] for row in rows
                    if row["arm"] == arm and row["size"] == size
                    and row["domain"] == domain]
            means.append(float(np.mean(vals)) if vals else np.nan)
        ax.plot(sizes, means, marker="o", label=arm)
    ax.set_xscale("log")
    ax.set_xticks(sizes, labels=[str(s) for s in sizes])
    ax.set_xlabel("training examples")
    ax.set_ylabel(f"accuracy on {domain}")
    ax.legend(fontsize=8)
    return _finish(fig, path)


def reverse_mask_bars(report: dict, path: str | Path) -> Path:
    """Kept-features model against its complement, per evaluation set."""
    names = list(report["baseline"])
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(1.4 * len(names) + 2.0, 3.2))
    ax.bar(x - 0.18, [report["baseline"][n] for n in names], width=0.36,
           label="trained mask", color="tab:blue")
    ax.bar(x + 0.18, [report["reversed"][n] for n in names], width=0.36,
           label="complemented mask", color="tab:red")
    ax.set_xticks(x, labels=names, fontsize=8)
    ax.set_ylabel(report.get("metric", "accuracy"))
    ax.set_ylim(0.0, 1.0)
    ax.legend(fontsize=8)
    return _finish(fig, path)


def confusion_matrix_figure(gold: np.ndarray, pred: np.ndarray, n_labels: int,
                            path: str | Path) -> Path:
    """Count matrix of gold rows against predicted columns."""
    counts = np.zeros((n_labels, n_labels), dtype=np.int64)
    for g, p in zip(np.asarray(gold, dtype=int), np.asarray(pred, dtype=int)):
        counts[g, p] += 1
    fig, ax = plt.subplots(figsize=(1.0 * n_labels + 2.0, 1.0 * n_labels + 1.6))
    image = ax.imshow(counts, cmap="Blues")
    threshold = counts.max() / 2.0 if counts.max() else 0.5
    for g in range(n_labels):
        for p in range(n_labels):
            ax.text(p, g, str(counts[g, p]), ha="center", va="center", fontsize=8,
                    color="white" if counts[g, p] > threshold else "black")
    ax.set_xlabel("predicted")
    ax.set_ylabel("gold")
    ax.set_xticks(range(n_labels))
    ax.set_yticks(range(n_labels))
    fig.colorbar(image, ax=ax)
    return _finish(fig, path)
