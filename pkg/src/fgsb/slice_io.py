"""Slice storage formats.

Two on-disk encodings are supported for a single 2D slice:

* ``.fgsb`` raw: ``b"FGSB"`` magic, ``u32`` height, ``u32`` width (little
  endian), then ``H*W`` row-major little-endian ``float32`` values.
* ``.png``: 16-bit grayscale. Intensities in ``[-1, 1]`` are mapped linearly
  onto ``[0, 65535]``, so a PNG round trip is lossy at the 3e-5 level.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"FGSB"
_HEADER = struct.Struct("<4sII")


class SliceFormatError(ValueError):
    pass


def write_raw(path: str | Path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise SliceFormatError(f"expected a 2D slice, got shape {img.shape}")
    h, w = img.shape
    payload = np.ascontiguousarray(img, dtype="<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(MAGIC, h, w) + payload)


def read_raw(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise SliceFormatError(f"{path}: truncated header")
    magic, h, w = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise SliceFormatError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * h * w
    if len(data) != expected:
        raise SliceFormatError(f"{path}: payload is {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(h, w).astype(np.float32)


def write_png16(path: str | Path, img: np.ndarray) -> None:
    img = np.clip(np.asarray(img, dtype=np.float64), -1.0, 1.0)
    q = np.round((img + 1.0) * 0.5 * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path)


def read_png16(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise SliceFormatError(f"{path}: expected single-channel PNG, got shape {arr.shape}")
    scale = 65535.0 if arr.dtype == np.uint16 or arr.max(initial=0) > 255 else 255.0
    return (arr.astype(np.float64) / scale * 2.0 - 1.0).astype(np.float32)


def read_slice(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".png":
        return read_png16(path)
    return read_raw(path)


def write_slice(path: str | Path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix == ".png":
        write_png16(path, img)
    else:
        write_raw(path, img)
