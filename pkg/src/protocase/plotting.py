"""Matplotlib rendering helpers (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

HEAT = np.array([1.0, 0.25, 0.0])   # overlay ramp colour


def overlay(image: np.ndarray, amap: np.ndarray, alpha: float = 0.6) -> np.ndarray:
    """Alpha-blend a min-max normalized activation map over a grayscale image as RGB."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    a = np.asarray(amap, dtype=np.float64)
    span = a.max() - a.min()
    a = (a - a.min()) / span if span > 0 else np.zeros_like(a)
    w = (alpha * a)[..., None]
    return np.clip((1.0 - w) * img[..., None] + w * HEAT, 0.0, 1.0)


def save_rgb(path, rgb: np.ndarray) -> Path:
    """Write an array as PNG at exactly its own pixel size."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.imsave(path, np.clip(rgb, 0.0, 1.0), cmap="gray" if np.ndim(rgb) == 2 else None, vmin=0.0, vmax=1.0)
    return path


def draw_box(rgb: np.ndarray, box: tuple[int, int, int, int], colour=(0.1, 0.9, 0.1)) -> np.ndarray:
    """Outline (r0, r1, c0, c1) inclusive on a copy of ``rgb``."""
    out = rgb.copy()
    r0, r1, c0, c1 = box
    out[r0, c0:c1 + 1] = out[r1, c0:c1 + 1] = colour
    out[r0:r1 + 1, c0] = out[r0:r1 + 1, c1] = colour
    return out


def loss_curve(history, path) -> Path:
    rows = [r for r in history if r[1] in ("warmup", "A1")]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if rows:
        vals = np.array([r[3:8] for r in rows], dtype=np.float64)
        x = np.arange(len(rows))
        for i, name in enumerate(("total", "ce", "cluster", "sep")):
            ax.plot(x, vals[:, i], label=name)
        ax.legend(fontsize=8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    fig.tight_layout()
    return _save(fig, path)


def roc_curves(curves: dict[str, tuple[np.ndarray, np.ndarray]], path, title: str = "") -> Path:
    """``curves`` maps a label to (scores, binary labels)."""
    fig, ax = plt.subplots(figsize=(4, 4))
    for name, (scores, labels) in curves.items():
        fpr, tpr = roc_points(scores, labels)
        ax.plot(fpr, tpr, label=name)
    ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title, fontsize=9)
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    thr = np.unique(s)[::-1]
    tpr = [0.0] + [float(np.mean(s[y] >= t)) for t in thr]
    fpr = [0.0] + [float(np.mean(s[~y] >= t)) for t in thr]
    return np.array(fpr), np.array(tpr)


def evidence_panel(test_rgb: np.ndarray, proto_rgb: np.ndarray | None, caption: str, path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(5, 2.8))
    axes[0].imshow(test_rgb)
    axes[0].set_title("test image", fontsize=8)
    if proto_rgb is not None:
        axes[1].imshow(proto_rgb, cmap="gray" if proto_rgb.ndim == 2 else None, vmin=0, vmax=1)
    axes[1].set_title("prototype source", fontsize=8)
    for ax in axes:
        ax.axis("off")
    fig.suptitle(caption, fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
