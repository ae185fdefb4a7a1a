"""Figures written next to the CSV/JSON artefacts of the CLI."""
from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(str(path), metadata={"Software": None})
    plt.close(fig)


def plot_loss_log(rows, path, window: int = 50):
    """Per-step loss for each stage on a log axis, with a running mean."""
    series = defaultdict(list)
    for stage, step, loss in rows:
        series[stage].append((step, loss))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3))
        for stage, pts in series.items():
            steps, losses = np.array(pts).T
            ax = axes[1] if stage == "scene" else axes[0]
            line, = ax.plot(steps, losses, lw=0.6, alpha=0.4)
            if len(losses) >= window:
                smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
                ax.plot(steps[window - 1:], smooth, lw=1.2, color=line.get_color(), label=stage)
            else:
                line.set_label(stage)
        for ax, title in zip(axes, ("object stage", "scene stage")):
            ax.set_title(title)
            ax.set_xlabel("step")
            ax.set_ylabel("loss")
            if ax.lines:
                ax.set_yscale("log")
                ax.legend(frameon=False)
        _save(fig, path)


def plot_views(images, path, titles=None):
    """Row of rendered views."""
    images = list(images)
    n = max(len(images), 1)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, n, figsize=(1.6 * n, 1.9), squeeze=False)
        for k, ax in enumerate(axes[0]):
            ax.axis("off")
            if k < len(images):
                ax.imshow(np.clip(images[k], 0, 1), interpolation="nearest")
                if titles:
                    ax.set_title(titles[k])
        _save(fig, path)


def plot_metrics(report: dict, path, title: str = ""):
    """Horizontal bar chart of scalar metrics."""
    items = [(k, v) for k, v in report.items() if isinstance(v, (int, float))]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 0.35 * len(items) + 0.8))
        names = [k for k, _ in items]
        ax.barh(names, [v for _, v in items], color="0.4")
        ax.invert_yaxis()
        for y, (_, v) in enumerate(items):
            ax.text(v, y, f" {v:.4g}", va="center")
        if title:
            ax.set_title(title)
        _save(fig, path)
