"""Image-fidelity and lesion-overlap metrics.

Fidelity metrics expect images already mapped to ``[0, 1]`` (see
:func:`to_unit`); the evaluation helpers do that mapping from ``[-1, 1]``.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

PSNR_CAP = 100.0
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5 -> 11-tap window at sigma 1.5
SSIM_WIN = 11
K1, K2 = 0.01, 0.03


def to_unit(x: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(x, dtype=np.float64) + 1.0) * 0.5, 0.0, 1.0)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(x_hat, x_ref, data_range: float = 1.0, mask=None) -> float:
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    a, b = _pair(x_hat, x_ref)
    diff = (a - b) if mask is None else (a - b)[np.asarray(mask, bool)]
    mse = float(np.mean(diff ** 2)) if diff.size else 0.0
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(data_range ** 2 / mse))


def ssim(x_hat, x_ref, data_range: float = 1.0) -> float:
    """Mean Gaussian-window SSIM over the interior (border of 5 px excluded)."""
    a, b = _pair(x_hat, x_ref)
    if a.ndim != 2 or min(a.shape) < SSIM_WIN:
        raise ValueError(f"ssim needs a 2D image of at least {SSIM_WIN}x{SSIM_WIN}, got {a.shape}")

    def blur(v):
        return ndimage.gaussian_filter(v, SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")

    ux, uy = blur(a), blur(b)
    vx = blur(a * a) - ux * ux
    vy = blur(b * b) - uy * uy
    vxy = blur(a * b) - ux * uy
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux ** 2 + uy ** 2 + c1) * (vx + vy + c2))
    pad = (SSIM_WIN - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean())


def nrmse(x_hat, x_ref, mask=None) -> float:
    """``||x_hat - x_ref||_2 / ||x_ref||_2``."""
    a, b = _pair(x_hat, x_ref)
    if mask is not None:
        m = np.asarray(mask, bool)
        a, b = a[m], b[m]
    denom = float(np.sqrt(np.sum(b * b)))
    if denom == 0.0:
        raise ZeroDivisionError("reference has zero norm")
    return float(np.sqrt(np.sum((a - b) ** 2))) / denom


def dice_recall(pred_mask, true_mask) -> tuple[float, float]:
    p, t = _pair(pred_mask, true_mask)
    if not (np.isin(p, (0, 1)).all() and np.isin(t, (0, 1)).all()):
        raise ValueError("masks must be binary")
    p, t = p.astype(bool), t.astype(bool)
    inter = float(np.count_nonzero(p & t))
    sp, st = float(p.sum()), float(t.sum())
    dice = 1.0 if sp + st == 0 else 2.0 * inter / (sp + st)
    recall = 1.0 if st == 0 else inter / st
    return dice, recall


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)

    @property
    def keys(self) -> list[str]:
        ks = []
        for r in self.rows:
            ks.extend(k for k, v in r.items() if isinstance(v, float) and k not in ks)
        return ks

    def aggregate(self) -> dict[str, dict[str, float]]:
        out = {}
        for k in self.keys:
            vals = np.array([r[k] for r in self.rows if k in r], dtype=np.float64)
            out[k] = {"mean": float(vals.mean()), "std": float(vals.std()), "n": int(vals.size)}
        return out

    def to_json(self) -> str:
        return json.dumps({"aggregate": self.aggregate(), "slices": self.rows}, sort_keys=True, indent=2)


def foreground(ref: np.ndarray, level: float = -0.95) -> np.ndarray:
    m = np.asarray(ref) > level
    return m if m.any() else np.ones_like(m)


def evaluate_slice(pred, ref, lesion_threshold: float | None = None, true_mask=None,
                   use_foreground: bool = True) -> dict:
    """Metrics for one ``[-1, 1]`` slice pair.

    PSNR and NRMSE are restricted to the reference foreground; SSIM uses the
    whole canvas. Lesion overlap uses ``pred >= threshold`` against
    ``true_mask`` (or ``ref >= threshold`` when no mask is given).
    """
    pred, ref = _pair(pred, ref)
    fg = foreground(ref) if use_foreground else None
    pu, ru = to_unit(pred), to_unit(ref)
    row = {"psnr": psnr(pu, ru, 1.0, fg), "ssim": ssim(pu, ru), "nrmse": nrmse(pu, ru, fg)}
    if lesion_threshold is not None or true_mask is not None:
        thr = lesion_threshold
        if thr is None:
            raise ValueError("lesion_threshold is needed to binarize the prediction")
        tm = (ref >= thr) if true_mask is None else np.asarray(true_mask) > 0.5
        pm = pred >= thr
        row["dice"], row["recall"] = dice_recall(pm.astype(np.uint8), tm.astype(np.uint8))
        row["lesion_pixels"] = float(tm.sum())
    return row


def evaluate(preds: Sequence, refs: Sequence, lesion_threshold: float | None = None,
             masks: Sequence | None = None, names: Sequence[str] | None = None,
             lesion_only: bool = True, workers: int = 1) -> MetricReport:
    """Per-slice rows plus mean/std aggregate.

    With ``lesion_only`` the dice/recall columns are only reported for slices
    whose reference actually contains lesion pixels. ``workers > 1`` scores
    slices on a thread pool; row order is unchanged.
    """
    if len(preds) != len(refs):
        raise ValueError("preds and refs differ in length")

    def one(i):
        m = None if masks is None else masks[i]
        return evaluate_slice(preds[i], refs[i], lesion_threshold, m)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            raw = list(pool.map(one, range(len(preds))))
    else:
        raw = [one(i) for i in range(len(preds))]
    rows = []
    for i, row in enumerate(raw):
        if lesion_only and row.get("lesion_pixels", 1.0) == 0.0:
            row.pop("dice"), row.pop("recall")
        row.pop("lesion_pixels", None)
        row["name"] = names[i] if names is not None else str(i)
        rows.append(row)
    return MetricReport(rows)
