"""Static figures: loss curves, metric bars and side-by-side comparison grids."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# drop the version string so reruns produce identical files
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def read_metrics_stream(path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]


def plot_loss_curves(records: Sequence[dict], path, smooth: int = 20) -> Path:
    """One panel per logged generator term plus D/E totals, moving-average smoothed."""
    keys = sorted({k for r in records for k in r if k.startswith(("G/", "D/total", "E/"))})
    n = max(1, len(keys))
    cols = min(4, n)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 2.4 * rows), squeeze=False)
    for ax, key in zip(axes.flat, keys):
        pts = [(r["step"], r[key]) for r in records if key in r]
        x, y = np.array(pts, dtype=np.float64).T
        if len(y) >= smooth > 1:
            y = np.convolve(y, np.ones(smooth) / smooth, mode="valid")
            x = x[smooth - 1:]
        ax.plot(x, y, lw=1)
        ax.set_title(key, fontsize=9)
        ax.tick_params(labelsize=7)
    for ax in list(axes.flat)[len(keys):]:
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, path)


def plot_metric_bars(summary: dict[str, dict[str, float]], path,
                     metrics: Sequence[str] = ("psnr", "ssim", "nrmse", "recall")) -> Path:
    """``summary`` maps variant name -> {metric: mean}."""
    names = list(summary)
    metrics = [m for m in metrics if any(m in summary[v] for v in names)]
    fig, axes = plt.subplots(1, max(1, len(metrics)), figsize=(3.0 * max(1, len(metrics)), 3.0), squeeze=False)
    for ax, m in zip(axes.flat, metrics):
        vals = [summary[v].get(m, np.nan) for v in names]
        ax.bar(range(len(names)), vals, color="tab:blue")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
        ax.set_title(m, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def plot_per_slice(report_rows: Sequence[dict], path, metrics: Sequence[str] = ("psnr", "ssim")) -> Path:
    fig, axes = plt.subplots(1, len(metrics), figsize=(4.0 * len(metrics), 2.6), squeeze=False)
    for ax, m in zip(axes.flat, metrics):
        ax.plot([r.get(m, np.nan) for r in report_rows], marker=".", lw=0.8)
        ax.set_xlabel("slice", fontsize=8)
        ax.set_title(m, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def comparison_grid(panels: Sequence[np.ndarray], titles: Sequence[str], path) -> Path:
    """Row of images; the last panel may be an error map (shown in [0, 1])."""
    fig, axes = plt.subplots(1, len(panels), figsize=(2.4 * len(panels), 2.6), squeeze=False)
    for ax, img, title in zip(axes.flat, panels, titles):
        lo, hi = (0.0, 1.0) if title.startswith("|") else (-1.0, 1.0)
        ax.imshow(img, cmap="gray", vmin=lo, vmax=hi, interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, path)
