"""Matplotlib figures written next to the delimited report files."""

from __future__ import annotations

from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no version or timestamp chunks, so identical data gives identical bytes
PNG_METADATA = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    plt.close(fig)


def plot_map(values: np.ndarray, path, title: str = "", cmap: str = "viridis", box=None) -> None:
    """Heatmap of a 2-D array; ``box`` = (y0, y1, x0, x1) draws an inclusive rectangle."""
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(values, cmap=cmap, interpolation="nearest")
    fig.colorbar(im, ax=ax, fraction=0.046)
    if box is not None:
        y0, y1, x0, x1 = box
        ax.add_patch(plt.Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0 + 1, y1 - y0 + 1, fill=False, ec="w", lw=1))
    if title:
        ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    _save(fig, path)


def plot_relative_improvement(deltas: Mapping[str, Mapping[str, Optional[float]]], path, baseline: str = "") -> None:
    """Grouped bars: one group per metric, one bar per model, value = delta vs the baseline."""
    models = list(deltas)
    metrics = list(next(iter(deltas.values()))) if deltas else []
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(metrics) + 2), 3.5))
    width = 0.8 / max(1, len(models))
    x = np.arange(len(metrics))
    for i, name in enumerate(models):
        vals = [np.nan if deltas[name][m] is None else deltas[name][m] for m in metrics]
        ax.bar(x + (i - (len(models) - 1) / 2) * width, vals, width, label=name)
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xticks(x)
    ax.set_xticklabels(metrics, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(f"delta vs {baseline}" if baseline else "delta")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def plot_losses(curves: Mapping[str, Sequence[float]], path, window: int = 50) -> None:
    """Training loss per run, smoothed by a trailing moving average."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, losses in curves.items():
        y = np.asarray(losses, dtype=np.float64)
        if y.size == 0:
            continue
        w = max(1, min(window, y.size))
        smooth = np.convolve(y, np.ones(w) / w, mode="valid")
        ax.plot(np.arange(w - 1, y.size), smooth, label=name, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)
