"""Report figures. Everything renders off-screen to files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 8,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 150,
    "savefig.bbox": "tight",
    "axes.spines.top": False,
    "axes.spines.right": False,
}

# background black, ignore white, classes from tab10
def label_palette(n_classes=20):
    cmap = plt.get_cmap("tab10")
    pal = np.zeros((256, 3))
    for c in range(1, min(n_classes, 254) + 1):
        pal[c] = cmap((c - 1) % 10)[:3]
    pal[255] = 1.0
    return pal


def colorize(labels, palette=None):
    palette = label_palette() if palette is None else palette
    return palette[np.asarray(labels, dtype=np.uint8)]


def step_panel(rows, path, titles=("Image", "Step 1: CAM+CRF", "Step 2: IRNet",
                                   "Step 3: Segmentation", "Ground truth")):
    """Grid of (image, mask, mask, ...) rows, one row per example."""
    rows = list(rows)
    if not rows:
        return None
    ncol = len(rows[0])
    with plt.rc_context(RC):
        fig, axes = plt.subplots(len(rows), ncol, figsize=(1.4 * ncol, 1.4 * len(rows)),
                                 squeeze=False)
        for r, row in enumerate(rows):
            for c, item in enumerate(row):
                ax = axes[r, c]
                ax.imshow(item if item.ndim == 3 else colorize(item), interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
                if r == 0:
                    ax.set_title(titles[c] if c < len(titles) else "")
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def bar_chart(names, values, path, ylabel="mean IoU", title=None):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.7 * len(names) + 1), 2.4))
        x = np.arange(len(names))
        ax.bar(x, values, color="#4c72b0", width=0.6)
        for xi, v in zip(x, values):
            ax.text(xi, v, f"{v:.3f}", ha="center", va="bottom", fontsize=7)
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=30 if len(names) > 4 else 0, ha="right" if len(names) > 4 else "center")
        ax.set_ylabel(ylabel)
        ax.set_ylim(0, max(1.0, max(values, default=0) * 1.1))
        if title:
            ax.set_title(title)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def training_curves(histories: dict, path):
    """One subplot per training run, plotting every numeric history key."""
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(histories), figsize=(2.8 * len(histories), 2.2),
                                 squeeze=False)
        for ax, (name, hist) in zip(axes[0], histories.items()):
            keys = [k for k in (hist[0] if hist else {}) if k != "epoch"]
            for k in keys:
                ax.plot([h["epoch"] for h in hist], [h[k] for h in hist], label=k)
            ax.set_title(name)
            ax.set_xlabel("epoch")
            if keys:
                ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
