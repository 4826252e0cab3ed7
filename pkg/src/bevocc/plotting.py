"""File-only figures: PNGs through matplotlib's Agg backend, and plain PGM slices."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

CLASS_COLORS = ["#ffffff", "#8c8c8c", "#1f77b4", "#d62728", "#ff7f0e", "#2ca02c"]


def write_pgm(path, image: np.ndarray) -> Path:
    """Binary (P5) 8-bit grayscale image; row 0 is the top of the picture."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {img.shape}")
    img = np.clip(img, 0, 255).astype(np.uint8)
    path = Path(path)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def label_slice_image(labels: np.ndarray, z: int, n_classes: int) -> np.ndarray:
    """Height slice ``z`` as gray levels ``label * (255 // (C - 1))``."""
    sl = labels[:, :, z].astype(np.int64)
    scale = 255 // max(1, n_classes - 1)
    return top_view(sl) * scale


def top_view(sl: np.ndarray) -> np.ndarray:
    """Ego-frame ``[x, y]`` array to image rows/cols with +x up and +y left."""
    return np.ascontiguousarray(sl[::-1, ::-1])


def write_slices(out_dir, stem: str, pred: np.ndarray, gt: np.ndarray, n_classes: int) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for z in range(gt.shape[2]):
        for tag, lab in (("pred", pred), ("gt", gt)):
            paths.append(write_pgm(out_dir / f"{stem}_z{z}_{tag}.pgm", label_slice_image(lab, z, n_classes)))
    return paths


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_slices(pred: np.ndarray, gt: np.ndarray, path, class_names) -> Path:
    z = gt.shape[2]
    cmap = ListedColormap(CLASS_COLORS[:len(class_names)])
    fig, axes = plt.subplots(2, z, figsize=(1.6 * z, 3.6), squeeze=False)
    for k in range(z):
        for row, (tag, lab) in enumerate((("pred", pred), ("gt", gt))):
            ax = axes[row][k]
            ax.imshow(top_view(lab[:, :, k]), cmap=cmap, vmin=0, vmax=len(class_names) - 1,
                      interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title(f"z={k}", fontsize=8)
            if k == 0:
                ax.set_ylabel(tag, fontsize=8)
    handles = [plt.Rectangle((0, 0), 1, 1, color=CLASS_COLORS[i]) for i in range(1, len(class_names))]
    fig.legend(handles, class_names[1:], loc="lower center", ncol=len(class_names) - 1, fontsize=7, frameon=False)
    fig.tight_layout(rect=(0, 0.08, 1, 1))
    return _save(fig, path)


def plot_loss(history, path, evals=None) -> Path:
    """Loss per step, a 20-step moving average and optional ``(step, rayiou)`` eval points."""
    hist = np.asarray(history, dtype=np.float64).reshape(-1, 3)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if len(hist):
        ax.plot(hist[:, 0], hist[:, 1], lw=0.6, alpha=0.5, label="loss")
        win = min(20, len(hist))
        smooth = np.convolve(hist[:, 1], np.ones(win) / win, mode="valid")
        ax.plot(hist[win - 1:, 0], smooth, lw=1.5, label=f"{win}-step mean")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    if evals:
        ev = np.asarray(evals, dtype=np.float64)
        ax2 = ax.twinx()
        ax2.plot(ev[:, 0], ev[:, 1], "o-", color="tab:green", label="RayIoU")
        ax2.set_ylabel("RayIoU")
        ax2.set_ylim(0, 1)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_bench(rows, path) -> Path:
    """Multiply-adds against BEV cell count, one line per instance-query count, plus dense attention."""
    rows = list(rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    for n_i in sorted({r["n_i"] for r in rows}):
        sel = sorted((r for r in rows if r["n_i"] == n_i), key=lambda r: r["n_b"])
        ax.plot([r["n_b"] for r in sel], [r["bixattn_flops"] for r in sel], "o-", label=f"bidirectional, n_i={n_i}")
    dense = sorted({(r["n_b"], r["dense_flops"]) for r in rows})
    ax.plot([d[0] for d in dense], [d[1] for d in dense], "k--", label="dense BEV self-attention")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("BEV cells n_b")
    ax.set_ylabel("attention-score multiply-adds")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(scores: dict, path) -> Path:
    """``scores`` maps head name to per-seed RayIoU values."""
    names = list(scores)
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for i, name in enumerate(names):
        vals = np.asarray(scores[name], dtype=np.float64)
        ax.scatter(np.full(len(vals), i), vals, color="tab:gray", zorder=3)
        ax.bar(i, vals.mean(), color="tab:blue", alpha=0.6)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, fontsize=8)
    ax.set_ylabel("RayIoU")
    fig.tight_layout()
    return _save(fig, path)
