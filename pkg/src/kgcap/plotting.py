"""Report figures written next to the JSON outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def new_figure(width: float = 4.5, height: float | None = None, **kwargs):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(width, height or width * GOLDEN), **kwargs)
    return fig, ax


def save(fig, path) -> Path:
    path = Path(path)
    with plt.rc_context(RC):
        fig.tight_layout()
        fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_training_log(entries: Sequence[dict], path, title: str = "") -> Path:
    """Loss per epoch, with CIDEr-D on a twin axis where it was measured."""
    train = [e for e in entries if e.get("split") == "train"]
    fig, ax = new_figure()
    with plt.rc_context(RC):
        ax.plot([e["epoch"] for e in train], [e["loss"] for e in train], color="#2b8cbe", label="loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        scored = [e for e in entries if e.get("cider") is not None]
        if scored:
            ax2 = ax.twinx()
            ax2.plot([e["epoch"] for e in scored], [e["cider"] for e in scored], "o-", color="#e6550d", label="CIDEr-D")
            ax2.set_ylabel("greedy CIDEr-D")
            ax2.set_ylim(bottom=0)
        if title:
            ax.set_title(title)
    return save(fig, path)


def plot_lambda_sweep(points: Sequence[dict], path, metric: str = "cider_d") -> Path:
    fig, ax = new_figure()
    with plt.rc_context(RC):
        lams = [p["lambda"] for p in points]
        ax.plot(lams, [p[metric] for p in points], "o-", color="#08589e")
        best = max(points, key=lambda p: p[metric])
        ax.axvline(best["lambda"], color="0.6", ls=":", lw=1)
        ax.set_xlabel(r"knowledge weight $\lambda$")
        ax.set_ylabel(metric.replace("_", "-").upper())
    return save(fig, path)


def plot_ablation(rows: Sequence[dict], path, metrics: Sequence[str] = ("bleu4", "rouge_l", "cider_d")) -> Path:
    fig, ax = new_figure(width=5.5)
    with plt.rc_context(RC):
        x = np.arange(len(metrics))
        width = 0.8 / max(len(rows), 1)
        for k, row in enumerate(rows):
            vals = [row[m] / (10.0 if m == "cider_d" else 1.0) for m in metrics]
            ax.bar(x + k * width, vals, width, label=row["config"])
        ax.set_xticks(x + width * (len(rows) - 1) / 2)
        ax.set_xticklabels(["BLEU-4", "ROUGE-L", "CIDEr-D / 10"][: len(metrics)] if tuple(metrics) == ("bleu4", "rouge_l", "cider_d") else list(metrics))
        ax.set_ylim(0, 1.05)
        ax.legend(frameon=False, ncol=2)
    return save(fig, path)


def plot_attention(alphas: Sequence[np.ndarray], words: Sequence[str], path) -> Path:
    """Heat map of region attention per generated word."""
    A = np.asarray(alphas)
    fig, ax = new_figure(width=max(3.0, 0.4 * A.shape[1] + 1.5), height=max(2.0, 0.3 * A.shape[0] + 1.0))
    with plt.rc_context(RC):
        im = ax.imshow(A, aspect="auto", cmap="viridis", vmin=0.0, vmax=1.0)
        ax.set_yticks(range(A.shape[0]))
        ax.set_yticklabels(list(words)[: A.shape[0]])
        ax.set_xlabel("region")
        fig.colorbar(im, ax=ax, fraction=0.05)
    return save(fig, path)
