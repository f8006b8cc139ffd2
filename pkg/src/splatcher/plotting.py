"""Matplotlib figures for the timing and bench reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .pipeline import KERNELS  # noqa: E402


def _stacked(ax, labels, series):
    bottom = np.zeros(len(labels))
    for kernel in KERNELS:
        vals = np.array([s[kernel] for s in series])
        if vals.any():
            ax.bar(labels, vals, bottom=bottom, label=kernel)
            bottom += vals
    ax.set_ylabel("seconds")
    ax.legend(fontsize="small", ncol=2)


def plot_bench(rows, path):
    """Stacked per-kernel times for each (tile_size, workers) bench row."""
    labels = [f"t{r['tile_size']}/w{r['workers']}" + ("*" if r.get("best") else "") for r in rows]
    fig, ax = plt.subplots(figsize=(max(6, 0.7 * len(rows) + 2), 4))
    _stacked(ax, labels, rows)
    ax.set_xlabel("tile size / workers (* = fastest)")
    ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_timings(stats, path):
    """Per-frame kernel breakdown from a run's stats."""
    frames = stats.per_frame or [(0, stats.kernel_times, stats.particles)]
    labels = [str(f) for f, _, _ in frames]
    fig, ax = plt.subplots(figsize=(max(5, 0.4 * len(frames) + 2), 4))
    _stacked(ax, labels, [t for _, t, _ in frames])
    ax.set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
