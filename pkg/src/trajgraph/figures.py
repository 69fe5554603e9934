"""Matplotlib report figures written next to the TSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricReport  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "font.size": 9,
    "axes.labelsize": 10,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
}
ACCENT = ("#4C72B0", "#D55E00")


def plot_loss_trace(trace: Sequence[tuple[int, int, float]], path: str | Path, window: int = 50) -> Path:
    """Raw per-step loss with a trailing moving average."""
    steps = np.array([s for _, s, _ in trace])
    loss = np.array([l for _, _, l in trace])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(steps, loss, color=ACCENT[0], alpha=0.4, label="step loss")
        if len(loss) >= window:
            smooth = np.convolve(loss, np.ones(window) / window, mode="valid")
            ax.plot(steps[window - 1 :], smooth, color=ACCENT[1], label=f"{window}-step mean")
        ax.set_xlabel("optimizer step")
        ax.set_ylabel("NLL")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_metric_bars(reports: dict[str, MetricReport], path: str | Path) -> Path:
    names = ("mADE", "mFDE", "aADE", "aFDE")
    x = np.arange(len(names))
    width = 0.8 / max(len(reports), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        for j, (label, rep) in enumerate(reports.items()):
            vals = [getattr(rep, n) for n in names]
            ax.bar(x + j * width, vals, width, label=label, color=ACCENT[j % len(ACCENT)])
        ax.set_xticks(x + width * (len(reports) - 1) / 2)
        ax.set_xticklabels(names)
        ax.set_ylabel("error (pixels)")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
