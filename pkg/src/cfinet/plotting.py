"""Static figure emitters (PNG via the Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image, ImageDraw  # noqa: E402

from .audit import SUBSET_NAMES, AnchorIoUAudit  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def anchor_iou_histograms(audit: AnchorIoUAudit, path, bins: int = 20) -> Path:
    """One panel per size subset: distribution of each GT's best anchor IoU."""
    fig, axes = plt.subplots(1, len(SUBSET_NAMES), figsize=(3.2 * len(SUBSET_NAMES), 2.8), sharex=True)
    edges = np.linspace(0, 1, bins + 1)
    means = audit.mean_max_iou()
    for ax, (i, name) in zip(axes, enumerate(SUBSET_NAMES)):
        vals = audit.max_ious[audit.subsets == i]
        ax.hist(vals, edges, color="tab:blue", alpha=0.8)
        ax.axvline(means[name], color="tab:red", lw=1)
        ax.set_title(f"{name} (n={len(vals)}, mean={means[name]:.2f})", fontsize=9)
        ax.set_xlabel("max anchor IoU")
    axes[0].set_ylabel("GTs")
    return _save(fig, path)


def hq_proposal_curves(series: Mapping[str, Sequence[float]], path, subset: str = "eS") -> Path:
    """High-quality proposals per GT against epoch, one line per model."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for name, ys in series.items():
        ax.plot(np.arange(1, len(ys) + 1), ys, marker="o", label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel(f"proposals with IoU>0.5 per {subset} GT")
    ax.legend()
    return _save(fig, path)


def ablation_bars(rows: Sequence[Dict[str, float]], path, metrics=("AP", "AP_eS", "AP_rS", "AP_gS")) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    width = 0.8 / max(len(rows), 1)
    x = np.arange(len(metrics))
    for k, row in enumerate(rows):
        ax.bar(x + k * width, [100 * float(row[m]) for m in metrics], width, label=row.get("config", str(k)))
    ax.set_xticks(x + width * (len(rows) - 1) / 2, metrics)
    ax.set_ylabel("AP (%)")
    ax.legend(fontsize=8)
    return _save(fig, path)


def draw_boxes(image: np.ndarray, boxes, path, labels=None, color=(255, 0, 0), ignores=None, scale: int = 4) -> Path:
    """Upscaled copy of ``image`` with outlined boxes; ignore regions in grey."""
    img = Image.fromarray(np.asarray(image, np.uint8)).resize(
        (image.shape[1] * scale, image.shape[0] * scale), Image.NEAREST
    )
    draw = ImageDraw.Draw(img)
    for b in np.asarray(ignores if ignores is not None else np.zeros((0, 4))).reshape(-1, 4):
        draw.rectangle([v * scale for v in b], outline=(128, 128, 128))
    for i, b in enumerate(np.asarray(boxes).reshape(-1, 4)):
        draw.rectangle([v * scale for v in b], outline=color)
        if labels is not None:
            draw.text((b[0] * scale + 1, b[1] * scale + 1), str(labels[i]), fill=color)
    img.save(path)
    return Path(path)
