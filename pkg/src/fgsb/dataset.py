"""Paired-slice data: normalization, padding, prior masks, flips, phantom cohort."""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .slice_io import read_slice, write_slice

log = logging.getLogger(__name__)

# incremented whenever normalize_intensity has to clip out-of-range inputs
clip_counter: Counter = Counter()

FOREGROUND_LEVEL = -0.95
FOREGROUND_MIN_FRACTION = 0.05
SPLITS = ("train", "test")


class InvalidRangeError(ValueError):
    pass


class CanvasError(ValueError):
    pass


@dataclass(frozen=True)
class SlicePair:
    source: np.ndarray
    target: np.ndarray
    prior_mask: np.ndarray | None = None
    subject_id: str = ""
    slice_index: int = 0

    def __post_init__(self):
        if self.source.ndim != 2 or self.source.shape != self.target.shape:
            raise ValueError(f"source {self.source.shape} and target {self.target.shape} must be equal 2D shapes")
        if self.prior_mask is not None:
            if self.prior_mask.shape != self.source.shape:
                raise ValueError("prior_mask shape differs from source")
            if not np.isin(self.prior_mask, (0, 1)).all():
                raise ValueError("prior_mask must be binary")
        for name in ("source", "target"):
            arr = getattr(self, name)
            if arr.size and (arr.min() < -1.0 or arr.max() > 1.0):
                raise ValueError(f"{name} values must lie in [-1, 1]")
        if self.slice_index < 0:
            raise ValueError("slice_index must be >= 0")

    @property
    def shape(self) -> tuple[int, int]:
        return self.source.shape


@dataclass
class DatasetManifest:
    pairs: list[SlicePair]
    splits: dict[str, str]
    canvas: tuple[int, int]
    normalization: dict[str, dict[str, list[float]]] = field(default_factory=dict)

    def __post_init__(self):
        for sid, split in self.splits.items():
            if split not in SPLITS:
                raise ValueError(f"subject {sid}: unknown split {split!r}")
        for p in self.pairs:
            if p.subject_id not in self.splits:
                raise ValueError(f"subject {p.subject_id} has no split assignment")
            if p.shape != tuple(self.canvas):
                raise CanvasError(f"{p.subject_id}/{p.slice_index}: shape {p.shape} != canvas {self.canvas}")

    def subset(self, split: str) -> list[SlicePair]:
        return [p for p in self.pairs if self.splits[p.subject_id] == split]

    def subjects(self, split: str) -> list[str]:
        return sorted({p.subject_id for p in self.subset(split)})

    def save(self, root: str | Path, fmt: str = "fgsb") -> Path:
        """Write slices under ``root/slices`` and a JSON-lines manifest."""
        root = Path(root)
        lines = []
        for p in self.pairs:
            sub = root / "slices" / p.subject_id
            sub.mkdir(parents=True, exist_ok=True)
            stem = f"{p.slice_index:04d}"
            rec = {
                "subject_id": p.subject_id,
                "slice_index": p.slice_index,
                "split": self.splits[p.subject_id],
                "canvas": list(self.canvas),
                "normalization": self.normalization.get(p.subject_id),
            }
            for key, arr in (("source", p.source), ("target", p.target), ("prior_mask", p.prior_mask)):
                if arr is None:
                    rec[key] = None
                    continue
                rel = Path("slices") / p.subject_id / f"{stem}_{key}.{fmt}"
                write_slice(root / rel, arr)
                rec[key] = rel.as_posix()
            lines.append(json.dumps(rec, sort_keys=True))
        path = root / "manifest.jsonl"
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.jsonl"
        root = path.parent
        pairs, splits, norm = [], {}, {}
        canvas = None
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            c = tuple(rec["canvas"])
            if canvas is None:
                canvas = c
            elif c != canvas:
                raise CanvasError(f"{path}:{lineno}: canvas {c} differs from {canvas}")
            arrays = {}
            for key in ("source", "target", "prior_mask"):
                if rec.get(key) is None:
                    arrays[key] = None
                    continue
                f = root / rec[key]
                if not f.exists():
                    raise FileNotFoundError(f"{path}:{lineno}: missing {f}")
                arr = read_slice(f)
                if arr.shape != canvas:
                    raise CanvasError(f"{f}: decoded shape {arr.shape} != canvas {canvas}")
                arrays[key] = arr
            if arrays["prior_mask"] is not None:
                arrays["prior_mask"] = (arrays["prior_mask"] > 0.5).astype(np.float32)
            sid = rec["subject_id"]
            if splits.setdefault(sid, rec["split"]) != rec["split"]:
                raise ValueError(f"subject {sid} appears in more than one split")
            if rec.get("normalization") is not None:
                norm[sid] = rec["normalization"]
            pairs.append(SlicePair(arrays["source"], arrays["target"], arrays["prior_mask"], sid, int(rec["slice_index"])))
        if canvas is None:
            raise ValueError(f"{path}: empty manifest")
        return cls(pairs, splits, canvas, norm)


def normalize_intensity(raw: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Affine map ``lo -> -1``, ``hi -> +1``. Out-of-range inputs are clipped and counted."""
    if not hi > lo:
        raise InvalidRangeError(f"need hi > lo, got lo={lo}, hi={hi}")
    raw = np.asarray(raw, dtype=np.float64)
    n_out = int(np.count_nonzero((raw < lo) | (raw > hi)))
    if n_out:
        clip_counter["normalize_intensity"] += n_out
        log.warning("normalize_intensity: clipped %d values outside [%g, %g]", n_out, lo, hi)
        raw = np.clip(raw, lo, hi)
    return np.clip(2.0 * (raw - lo) / (hi - lo) - 1.0, -1.0, 1.0)


def denormalize_intensity(img: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if not hi > lo:
        raise InvalidRangeError(f"need hi > lo, got lo={lo}, hi={hi}")
    return (np.asarray(img, dtype=np.float64) + 1.0) * 0.5 * (hi - lo) + lo


def pad_to_canvas(img: np.ndarray, canvas: tuple[int, int], fill: float | None = None) -> np.ndarray:
    """Center ``img`` on a canvas filled with ``img.min()`` (or ``fill``); never crops."""
    img = np.asarray(img)
    H, W = canvas
    h, w = img.shape
    if h > H or w > W:
        raise CanvasError(f"image {img.shape} does not fit canvas {canvas}")
    if (h, w) == (H, W):
        return img.copy()
    out = np.full((H, W), img.min() if fill is None else fill, dtype=img.dtype)
    top, left = (H - h) // 2, (W - w) // 2
    out[top:top + h, left:left + w] = img
    return out


def extract_prior_mask(target: np.ndarray, threshold: float) -> np.ndarray:
    return (np.asarray(target) >= threshold).astype(np.float32)


def is_foreground_slice(img: np.ndarray, level: float = FOREGROUND_LEVEL,
                        min_fraction: float = FOREGROUND_MIN_FRACTION) -> bool:
    return float(np.mean(np.asarray(img) > level)) >= min_fraction


def augment_hflip(pair: SlicePair, p: float, rng: np.random.Generator) -> SlicePair:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"flip probability must be in [0, 1], got {p}")
    # always draw so the stream advances identically regardless of p
    if rng.random() >= p:
        return pair
    mask = None if pair.prior_mask is None else pair.prior_mask[:, ::-1].copy()
    return replace(pair, source=pair.source[:, ::-1].copy(), target=pair.target[:, ::-1].copy(), prior_mask=mask)


def build_manifest(subjects: Mapping[str, Sequence[tuple]], canvas: tuple[int, int],
                   test_subjects: Iterable[str] = (), prior_threshold: float | None = None,
                   drop_background: bool = True) -> DatasetManifest:
    """Ingest raw paired slices.

    ``subjects`` maps a subject id to a sequence of ``(source, target)`` or
    ``(source, target, mask)`` raw arrays. Normalization uses the subject-wide
    min/max of each modality, recorded in the manifest so it can be inverted.
    """
    test_subjects = set(test_subjects)
    pairs, splits, norm = [], {}, {}
    for sid in sorted(subjects):
        items = subjects[sid]
        if not items:
            continue
        src_lo = float(min(np.min(it[0]) for it in items))
        src_hi = float(max(np.max(it[0]) for it in items))
        tgt_lo = float(min(np.min(it[1]) for it in items))
        tgt_hi = float(max(np.max(it[1]) for it in items))
        norm[sid] = {"source": [src_lo, src_hi], "target": [tgt_lo, tgt_hi]}
        splits[sid] = "test" if sid in test_subjects else "train"
        for idx, item in enumerate(items):
            src = pad_to_canvas(normalize_intensity(item[0], src_lo, src_hi), canvas).astype(np.float32)
            tgt = pad_to_canvas(normalize_intensity(item[1], tgt_lo, tgt_hi), canvas).astype(np.float32)
            if drop_background and not is_foreground_slice(src):
                continue
            mask = None
            if len(item) > 2 and item[2] is not None:
                m = np.asarray(item[2]) > 0
                mask = pad_to_canvas(m.astype(np.float32), canvas, fill=0.0)
            elif prior_threshold is not None:
                mask = extract_prior_mask(tgt, prior_threshold)
            pairs.append(SlicePair(src, tgt, mask, sid, idx))
    return DatasetManifest(pairs, splits, tuple(canvas), norm)


# ---------------------------------------------------------------------------
# phantom cohort

LESION_PEAK = 0.9
LESION_CUTOFF = 0.05
# hypointense footprint of a lesion in the source modality, so lesions are
# recoverable from the input but invisible to the intensity remap
LESION_SOURCE_CUE = 0.3
# blob width in pixels at a 64 px canvas (scaled with the canvas)
LESION_SIGMA = (2.0, 3.5)


def phantom_remap(s: np.ndarray) -> np.ndarray:
    """Monotone source->target intensity map used by the phantom."""
    s = np.clip(np.asarray(s, dtype=np.float64), -1.0, 1.0)
    return 2.0 * ((s + 1.0) / 2.0) ** 0.6 - 1.0


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    y, x = yy - cy, xx - cx
    u = (x * c + y * s) / rx
    v = (-x * s + y * c) / ry
    return u * u + v * v <= 1.0


def _phantom_slice(rng: np.random.Generator, subj: dict, z: float, canvas, lesion_rate: float):
    H, W = canvas
    scale = min(H, W) / 64.0
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    cy, cx = subj["cy"] * H, subj["cx"] * W
    shrink = np.sqrt(max(1.0 - z * z, 0.05))
    ry, rx = subj["ry"] * H * shrink, subj["rx"] * W * shrink

    img = np.full((H, W), -1.0)
    head = _ellipse(yy, xx, cy, cx, ry, rx, subj["angle"])
    img[head] = subj["gm"]
    wm = _ellipse(yy, xx, cy, cx, 0.72 * ry, 0.72 * rx, subj["angle"])
    img[wm] = subj["wm"]
    # ventricles
    vr = 0.18 * shrink
    for side in (-1.0, 1.0):
        vent = _ellipse(yy, xx, cy, cx + side * 0.2 * rx, vr * ry * 1.6, vr * rx, subj["angle"] + side * 0.3)
        img[vent] = subj["csf"]
    # sulci-like texture blobs
    for _ in range(rng.integers(3, 7)):
        ang = rng.uniform(0, 2 * np.pi)
        rad = rng.uniform(0.75, 0.92)
        by, bx = cy + rad * ry * np.sin(ang), cx + rad * rx * np.cos(ang)
        blob = _ellipse(yy, xx, by, bx, rng.uniform(1.5, 3.0) * scale, rng.uniform(1.5, 3.0) * scale)
        img[blob & head] = subj["csf"] + rng.uniform(0.0, 0.2)
    img = ndimage.gaussian_filter(img, sigma=0.8 * scale)
    img[~ndimage.binary_dilation(head, iterations=max(1, int(round(2 * scale))))] = -1.0
    img = np.clip(img, -1.0, 1.0)

    lesion = np.zeros((H, W))
    if lesion_rate > 0 and rng.random() < lesion_rate:
        wm_inner = ndimage.binary_erosion(wm, iterations=max(1, int(round(3 * scale))))
        cand = np.argwhere(wm_inner)
        if len(cand):
            for _ in range(rng.integers(1, 5)):
                py, px = cand[rng.integers(len(cand))]
                sigma = rng.uniform(*LESION_SIGMA) * scale
                g = np.exp(-((yy - py) ** 2 + (xx - px) ** 2) / (2 * sigma * sigma))
                lesion = np.maximum(lesion, g)
    lesion[lesion < LESION_CUTOFF] = 0.0

    source = np.clip(img - LESION_SOURCE_CUE * lesion, -1.0, 1.0)
    target = phantom_remap(source) * (1.0 - lesion) + LESION_PEAK * lesion
    mask = (lesion > 0).astype(np.float32)
    return source.astype(np.float32), target.astype(np.float32), mask


def generate_phantom_dataset(seed: int, n_subjects: int, slices_per_subject: int,
                             canvas: tuple[int, int] = (256, 256), lesion_rate: float = 0.5,
                             n_test_subjects: int = 0) -> DatasetManifest:
    """Deterministic paired phantom cohort.

    Source slices are smooth ellipse tissue layouts; targets are
    ``phantom_remap(source)`` plus bright Gaussian lesions (peak 0.9) that the
    source only shows as a faint dark footprint. The last ``n_test_subjects``
    subjects form the test split.
    """
    if n_subjects < 1 or slices_per_subject < 1:
        raise ValueError("need n_subjects >= 1 and slices_per_subject >= 1")
    if not 0 <= n_test_subjects < n_subjects:
        raise ValueError("n_test_subjects must leave at least one training subject")
    canvas = (int(canvas[0]), int(canvas[1]))
    pairs, splits, norm = [], {}, {}
    for s in range(n_subjects):
        sid = f"phantom{s:03d}"
        srng = np.random.default_rng([seed, s])
        subj = dict(
            cy=srng.uniform(0.47, 0.53), cx=srng.uniform(0.47, 0.53),
            ry=srng.uniform(0.36, 0.42), rx=srng.uniform(0.30, 0.36),
            angle=srng.uniform(-0.15, 0.15),
            wm=srng.uniform(0.30, 0.50), gm=srng.uniform(-0.10, 0.10), csf=srng.uniform(-0.70, -0.50),
        )
        splits[sid] = "test" if s >= n_subjects - n_test_subjects else "train"
        norm[sid] = {"source": [-1.0, 1.0], "target": [-1.0, 1.0]}
        zs = np.linspace(-0.8, 0.8, slices_per_subject) if slices_per_subject > 1 else np.zeros(1)
        for k, z in enumerate(zs):
            rng = np.random.default_rng([seed, s, k])
            src, tgt, mask = _phantom_slice(rng, subj, float(z), canvas, lesion_rate)
            pairs.append(SlicePair(src, tgt, mask, sid, k))
    return DatasetManifest(pairs, splits, canvas, norm)


def stack_pairs(pairs: Sequence[SlicePair]):
    """Batch arrays ``(N,1,H,W)`` for source, target and prior mask (zeros when absent)."""
    src = np.stack([p.source for p in pairs])[:, None].astype(np.float32)
    tgt = np.stack([p.target for p in pairs])[:, None].astype(np.float32)
    mask = np.stack([p.prior_mask if p.prior_mask is not None else np.zeros(p.shape, np.float32)
                     for p in pairs])[:, None].astype(np.float32)
    return src, tgt, mask
