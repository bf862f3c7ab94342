"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_error_curves(reports, path) -> Path:
    """Normalized layer error per seed, one line per strategy label, one panel per layer."""
    by_layer = defaultdict(lambda: defaultdict(list))
    for r in reports:
        by_layer[r.layer][r.curve_label].append((r.seed, r.error_normalized))
    layers = sorted(by_layer)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(layers), figsize=(4.2 * len(layers), 3.2), squeeze=False)
        for ax, layer in zip(axes[0], layers):
            for label in sorted(by_layer[layer]):
                pts = sorted(by_layer[layer][label])
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3, lw=1, label=label)
            ax.set_title(layer)
            ax.set_xlabel("seed")
            ax.set_ylabel("normalized layer error")
            ax.legend(frameon=False)
        return _save(fig, path)


def plot_speedup(rows, path) -> Path:
    d = np.array([r.d_row for r in rows])
    with plt.rc_context(RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
        ax1.plot(d, [r.t_obq_s for r in rows], marker="o", label="obq (row-wise)")
        ax1.plot(d, [r.t_fastobq_s for r in rows], marker="s", label="fastobq")
        ax1.set_yscale("log")
        ax1.set_xlabel("d_row")
        ax1.set_ylabel("median wall time [s]")
        ax1.legend(frameon=False)
        ax2.plot(d, [r.speedup for r in rows], marker="o", color="k")
        ax2.set_xlabel("d_row")
        ax2.set_ylabel("speedup (obq / fastobq)")
        ax2.set_title(f"d_col = {rows[0].d_col}" if rows else "")
        return _save(fig, path)


def plot_order_heatmap(order: np.ndarray, path, title: str = "") -> Path:
    """Step at which each weight was quantized; columns that go early show as dark bands."""
    with plt.rc_context(RC):
        h, w = order.shape
        fig, ax = plt.subplots(figsize=(min(10, 2 + w / 24), min(8, 1.5 + h / 24)))
        im = ax.imshow(order, aspect="auto", cmap="viridis", interpolation="nearest")
        fig.colorbar(im, ax=ax, label="quantization step")
        ax.set_xlabel("column")
        ax.set_ylabel("row")
        if title:
            ax.set_title(title)
        return _save(fig, path)
