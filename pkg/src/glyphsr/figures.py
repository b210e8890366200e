"""Report figures rendered to files alongside the delimited outputs."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_loss_curve(log_path, out_png, window: int = 100) -> Path:
    """Raw and trailing-mean training loss against the step counter."""
    steps, losses = [], []
    with open(log_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                steps.append(rec["step"])
                losses.append(rec["loss"])
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=0.6, alpha=0.4, label="per step")
    if len(losses) >= 2:
        kernel = np.ones(min(window, len(losses))) / min(window, len(losses))
        smooth = np.convolve(losses, kernel, mode="valid")
        ax.plot(steps[len(steps) - len(smooth):], smooth, lw=1.8, label=f"mean over {len(kernel)}")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def plot_sweep_heatmap(table: dict, out_png) -> Path:
    """Word accuracy over the (omega, R) grid."""
    omegas = sorted({row["omega"] for row in table["rows"]})
    rs = sorted({row["R"] for row in table["rows"]})
    grid = np.full((len(omegas), len(rs)), np.nan)
    for row in table["rows"]:
        grid[omegas.index(row["omega"]), rs.index(row["R"])] = row["word_acc"]
    fig, ax = plt.subplots(figsize=(1.6 + 1.2 * len(rs), 1.2 + 0.9 * len(omegas)))
    im = ax.imshow(grid, cmap="viridis", vmin=0.0, vmax=1.0, aspect="auto")
    ax.set_xticks(range(len(rs)), [str(r) for r in rs])
    ax.set_yticks(range(len(omegas)), [f"{o:g}" for o in omegas])
    ax.set_xlabel("iterations R")
    ax.set_ylabel("guidance weight")
    for i in range(len(omegas)):
        for j in range(len(rs)):
            if not np.isnan(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.3f}", ha="center", va="center",
                        color="w" if grid[i, j] < 0.6 else "k", fontsize=9)
    fig.colorbar(im, ax=ax, label="word accuracy")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def plot_restore_panel(images: list[tuple[str, np.ndarray]], out_png) -> Path:
    """Stacked before/after strips, one row per (label, image)."""
    fig, axes = plt.subplots(len(images), 1, figsize=(8, 1.2 * len(images)))
    if len(images) == 1:
        axes = [axes]
    for ax, (label, img) in zip(axes, images):
        show = (np.clip(img, -1, 1) + 1) / 2
        ax.imshow(show[:, :, 0] if show.shape[2] == 1 else show, cmap="gray", vmin=0, vmax=1)
        ax.set_title(label, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)
