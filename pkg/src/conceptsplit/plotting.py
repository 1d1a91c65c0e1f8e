"""Matplotlib figures written next to the CSV/JSON reports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _figure(width=4.0, ratio=0.62, ncols=1):
    with plt.rc_context(RC):
        return plt.subplots(1, ncols, figsize=(width * ncols, width * ratio), squeeze=False)


def _save(fig, path) -> Path:
    path = Path(path)
    with plt.rc_context(RC):
        fig.tight_layout()
        fig.savefig(path)
    plt.close(fig)
    return path


def entropy_curves(series, path, title="Attention entropy") -> Path:
    fig, ax = _figure()
    ax = ax[0, 0]
    for s in series:
        ax.plot(s.steps, s.values, label=s.label, lw=1.2)
    ax.set_xlabel("sampler step")
    ax.set_ylabel("entropy (nats)")
    ax.set_title(title)
    ax.legend(frameon=False)
    return _save(fig, path)


def iou_heatmap(matrix, labels, path) -> Path:
    fig, ax = _figure(width=3.2, ratio=0.9)
    ax = ax[0, 0]
    im = ax.imshow(np.asarray(matrix), vmin=0, vmax=1, cmap="viridis")
    ax.set_xticks(range(len(labels)), labels)
    ax.set_yticks(range(len(labels)), labels)
    for i, row in enumerate(matrix):
        for j, v in enumerate(row):
            ax.text(j, i, f"{v:.2f}", ha="center", va="center", color="w" if v < 0.6 else "k", fontsize=8)
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_title("mask IoU")
    return _save(fig, path)


def map_grid(maps, masks, labels, path) -> Path:
    """Attention maps (top row) and their AFG masks (bottom row), one column per token."""
    k = len(labels)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(2, k, figsize=(1.8 * k, 3.6), squeeze=False)
    for j in range(k):
        axes[0, j].imshow(maps[j], cmap="magma")
        axes[0, j].set_title(labels[j])
        axes[1, j].imshow(masks[j], cmap="gray", vmin=0, vmax=1)
        for r in range(2):
            axes[r, j].set_xticks([])
            axes[r, j].set_yticks([])
    return _save(fig, path)


def sweep_plot(rows, axis: str, metric: str, path) -> Path:
    """Median of ``metric`` against the swept value, one line per mode."""
    fig, ax = _figure()
    ax = ax[0, 0]
    modes = sorted({r["mode"] for r in rows})
    values = []
    for r in rows:
        if r["value"] not in values:
            values.append(r["value"])
    xs = np.arange(len(values))
    for mode in modes:
        ys = []
        for v in values:
            sel = [r[metric] for r in rows if r["mode"] == mode and r["value"] == v and r[metric] is not None]
            ys.append(float(np.median(sel)) if sel else np.nan)
        ax.plot(xs, ys, marker="o", lw=1.2, label=mode)
    ax.set_xticks(xs, [str(v) for v in values])
    ax.set_xlabel(axis)
    ax.set_ylabel(metric)
    ax.legend(frameon=False)
    return _save(fig, path)
