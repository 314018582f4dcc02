"""Report artifacts: delimited text plus rendered figures.

Every report the command-line tool writes comes through here: the CSV is the
canonical machine-readable artifact, and a matplotlib figure is rendered next
to it for human eyes. Figures are written through the Agg backend with fixed
metadata so identical inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

_SAVE_KW = dict(metadata={"Software": None}, dpi=110)


def write_text(path: str | Path, content: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(content, encoding="utf-8")


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """Header plus one line per row; floats via repr so they round-trip."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def save_training_curves(rows: Sequence[dict], path: str | Path) -> None:
    """Train loss on the left axis, validation metric(s) on the right."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    epochs = [row["epoch"] for row in rows]
    ax.plot(epochs, [row["train_loss"] for row in rows],
            color="tab:blue", marker="o", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    val_keys = [k for k in (rows[0].keys() if rows else [])
                if k.startswith("val_")]
    if val_keys:
        ax2 = ax.twinx()
        for key, color in zip(val_keys, ("tab:red", "tab:green", "tab:purple")):
            ax2.plot(epochs, [row[key] for row in rows], color=color,
                     marker="s", label=key)
        ax2.set_ylabel(" / ".join(val_keys))
        ax2.set_ylim(0.0, 1.05)
        handles1, labels1 = ax.get_legend_handles_labels()
        handles2, labels2 = ax2.get_legend_handles_labels()
        ax.legend(handles1 + handles2, labels1 + labels2, loc="center right")
    else:
        ax.legend(loc="upper right")
    ax.set_title("training progress")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_roc_figure(points: Sequence[tuple[float, float]], auc_value: float,
                    path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    ax.plot(xs, ys, color="tab:blue", marker=".", label=f"AUC = {auc_value:.4f}")
    ax.plot([0, 1], [0, 1], color="gray", linestyle="--", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("ROC")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_ratio_histogram(ratios: Sequence[float], map_value: float,
                         path: str | Path) -> None:
    """Per-case detected-fraction distribution with the mean marked."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.hist(list(ratios), bins=np.linspace(0.0, 1.0, 21), color="tab:blue",
            edgecolor="white")
    ax.axvline(map_value, color="tab:red", linestyle="--",
               label=f"mean = {map_value:.4f}")
    ax.set_xlabel("detected fraction of true lesion area")
    ax.set_ylabel("cases")
    ax.set_title("segmentation recall per case")
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_roi_demo_figure(feature_map: np.ndarray, align_bins: np.ndarray,
                         pool_bins: np.ndarray, roi: tuple[float, float, float, float],
                         path: str | Path) -> None:
    """Feature map with the roi outline, next to both pooled outputs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, 3, figsize=(10.0, 3.6))
    x1, y1, x2, y2 = roi
    axes[0].imshow(feature_map, cmap="viridis", interpolation="nearest")
    axes[0].add_patch(plt.Rectangle((x1, y1), x2 - x1, y2 - y1, fill=False,
                                    edgecolor="red", linewidth=1.5))
    axes[0].set_title("feature map + roi")
    axes[1].imshow(align_bins, cmap="viridis", interpolation="nearest")
    axes[1].set_title("bilinear alignment")
    axes[2].imshow(pool_bins, cmap="viridis", interpolation="nearest")
    axes[2].set_title("quantized max pool")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_dataset_preview(images: Sequence[np.ndarray],
                         boxes: Sequence[Sequence[tuple[float, float, float, float]]],
                         labels: Sequence[str], path: str | Path,
                         columns: int = 4) -> None:
    """A small montage of cases with their ground-truth boxes drawn."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = len(images)
    rows = (count + columns - 1) // columns
    fig, axes = plt.subplots(rows, columns,
                             figsize=(2.2 * columns, 2.4 * rows))
    axes = np.atleast_1d(axes).reshape(-1)
    for ax in axes[count:]:
        ax.axis("off")
    for ax, img, case_boxes, label in zip(axes, images, boxes, labels):
        ax.imshow(img, cmap="gray", vmin=0.0, vmax=1.0,
                  interpolation="nearest")
        for x1, y1, x2, y2 in case_boxes:
            ax.add_patch(plt.Rectangle((x1, y1), x2 - x1, y2 - y1, fill=False,
                                       edgecolor="red", linewidth=1.0))
        ax.set_title(label, fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
