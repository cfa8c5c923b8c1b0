"""Matplotlib figures written to files (Agg backend, no display needed)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_TERMS = ("l_intra", "l_neg", "l_inter_fg", "l_inter_bg", "total")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curves(records: list[dict], path) -> Path:
    """One line per loss term against the step number."""
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [r["step"] for r in records]
    for term in LOSS_TERMS:
        if records and term in records[0]:
            ax.plot(steps, [r[term] for r in records], label=term, lw=1.2 if term == "total" else 0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_image_panel(image_id: str, saliency: np.ndarray, mask: np.ndarray, groups: np.ndarray, path,
                     gt: np.ndarray | None = None) -> Path:
    """Saliency, binary mask, group map and (optionally) the ground-truth mask side by side."""
    panels = [("saliency", saliency, "viridis", (0, 1)), ("mask", mask, "gray", (0, 1)),
              ("groups", groups, "tab10", None)]
    if gt is not None:
        panels.append(("ground truth", gt, "gray", (0, 1)))
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3))
    for ax, (title, img, cmap, lim) in zip(axes, panels):
        kw = {"vmin": lim[0], "vmax": lim[1]} if lim else {}
        ax.imshow(np.asarray(img, dtype=float), cmap=cmap, interpolation="nearest", **kw)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.suptitle(image_id, fontsize=10)
    return _save(fig, path)


def plot_metrics(metrics: dict, path) -> Path:
    """Bar chart of the scalar metrics in [0, 1]."""
    names = [k for k, v in metrics.items() if isinstance(v, (int, float)) and not isinstance(v, bool)]
    fig, ax = plt.subplots(figsize=(1.2 * max(len(names), 2) + 1, 3))
    values = [metrics[k] for k in names]
    ax.bar(names, values, color="tab:blue")
    for i, v in enumerate(values):
        ax.text(i, v + 0.02, f"{v:.3f}", ha="center", fontsize=8)
    ax.set_ylim(0, 1.1)
    ax.set_ylabel("score")
    return _save(fig, path)
