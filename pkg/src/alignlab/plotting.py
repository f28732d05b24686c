"""Figure helpers for the report path. Everything renders to files (Agg backend)."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from alignlab.trainer.metrics import smoothed  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0

RC = {
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 9,
    "xtick.labelsize": 9,
    "ytick.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def pretty_plot(width: float = 6.0, height: float | None = None):
    height = height or width * GOLDEN
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(RC):
        fig.tight_layout()
        fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_curve(losses: Sequence[float], path, alpha: float = 0.01, title: str = "distillation loss"):
    fig, ax = pretty_plot()
    steps = np.arange(len(losses))
    ax.plot(steps, losses, color="0.75", lw=0.8, label="per step")
    ax.plot(steps, smoothed(losses, alpha), color="C0", lw=1.6, label=f"EMA ({alpha})")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_ablation(rows: Sequence[dict], path, metrics=("latent_cosine", "ssim", "teacher_mse"),
                  title: str = "ablation"):
    names = [r["variant"] for r in rows]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.0))
    for ax, metric in zip(np.atleast_1d(axes), metrics):
        ax.bar(names, [r[metric] for r in rows], color=[f"C{i}" for i in range(len(rows))])
        ax.set_title(metric)
        ax.tick_params(axis="x", rotation=45)
    fig.suptitle(title)
    return _save(fig, path)


def plot_gap(rows: Sequence[dict], path):
    fig, ax = pretty_plot()
    names = [r["modality"] for r in rows]
    x = np.arange(len(rows))
    ax.bar(x - 0.2, [r["init_distance"] for r in rows], 0.4, label="initialised", color="0.6")
    ax.bar(x + 0.2, [r["trained_distance"] for r in rows], 0.4, label="trained", color="C0")
    ax.set_xticks(x, names)
    ax.set_ylabel("cosine distance to teacher text features")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_latents(latents: np.ndarray, path, titles: Sequence[str] | None = None):
    """One row per sample, one column per latent channel."""
    latents = np.asarray(latents)
    n, ch = latents.shape[:2]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(n, ch, figsize=(1.6 * ch, 1.6 * n), squeeze=False)
    lim = float(np.abs(latents).max()) or 1.0
    for i in range(n):
        for j in range(ch):
            ax = axes[i, j]
            ax.imshow(latents[i, j], cmap="RdBu_r", vmin=-lim, vmax=lim)
            ax.set_xticks([])
            ax.set_yticks([])
        if titles:
            axes[i, 0].set_ylabel(titles[i], fontsize=7)
    return _save(fig, path)
