"""Sentinel-2 L2A composites -> web-style images for embedding.

Raw reflectance (scaled by 10,000) is clipped and divided into [0, 1]; dark
scenes then get one scalar gain so that the mean lands at 0.5, capped at 8x.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import png

from .errors import EmptyImage

REFLECTANCE_SCALE = 10_000
DARK_MEAN = 0.25
TARGET_MEAN = 0.5
MAX_GAIN = 8.0


@dataclass(frozen=True)
class NormalizedAnchorImage:
    values: np.ndarray  # (H, W, 3) float64 in [0, 1]
    applied_gain: float

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def _check(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.size == 0 or arr.ndim < 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise EmptyImage("anchor image has no pixels")
    return arr


def to_reflectance(img) -> np.ndarray:
    arr = _check(img).astype(np.float64)
    if (arr < 0).any():
        raise ValueError("raw reflectance values must be non-negative")
    return np.minimum(arr, REFLECTANCE_SCALE) / REFLECTANCE_SCALE


def adaptive_gain(img) -> NormalizedAnchorImage:
    """Brighten dark images; a single gain for all pixels and channels.

    Only images whose mean is strictly below 0.25 are touched. An all-zero
    image takes the maximum gain (the limit of 0.5 / mean) and stays black.
    """
    arr = _check(img).astype(np.float64)
    m = float(arr.mean())
    if m < DARK_MEAN:
        gain = MAX_GAIN if m <= 0.0 else min(TARGET_MEAN / m, MAX_GAIN)
        out = np.minimum(arr * gain, 1.0)
    else:
        gain = 1.0
        out = arr.copy()
    return NormalizedAnchorImage(out, gain)


def normalize_anchor(img) -> NormalizedAnchorImage:
    return adaptive_gain(to_reflectance(img))


_HALF_STEP_SLACK = 1e-9


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Scale [0, 1] to 0..255, rounding halves up.

    Gain arithmetic can land a hair below an exact half step (0.5 * 255
    computed as 127.49999999999999); anything within 1e-9 counts as the tie.
    """
    scaled = np.clip(values, 0.0, 1.0) * 255.0
    return np.minimum(np.floor(scaled + 0.5 + _HALF_STEP_SLACK), 255).astype(np.uint8)


# -- file I/O -----------------------------------------------------------------


def read_raw_grid(path) -> np.ndarray:
    """Parse the plain-text fixture format.

    First line ``width height``; then ``height`` lines of ``width`` pixels.
    A pixel line holds either ``width`` values (grey, replicated to RGB) or
    ``3 * width`` values (interleaved RGB).
    """
    tokens_lines = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not tokens_lines:
        raise EmptyImage(f"{path}: empty raw grid")
    width, height = (int(t) for t in tokens_lines[0][:2])
    rows = tokens_lines[1:]
    if width <= 0 or height <= 0:
        raise EmptyImage(f"{path}: non-positive size {width}x{height}")
    if len(rows) != height:
        raise ValueError(f"{path}: expected {height} rows, found {len(rows)}")
    data = np.array([[int(t) for t in r] for r in rows], dtype=np.int64)
    if data.shape[1] == width:
        return np.repeat(data[:, :, None], 3, axis=2)
    if data.shape[1] == 3 * width:
        return data.reshape(height, width, 3)
    raise ValueError(f"{path}: row length {data.shape[1]} fits neither {width} nor {3 * width}")


def read_png(path) -> np.ndarray:
    """Read an 8- or 16-bit PNG as an (H, W, 3) integer array."""
    width, height, rows, info = png.Reader(filename=str(path)).asDirect()
    planes = info["planes"]
    arr = np.vstack([np.asarray(r, dtype=np.int64) for r in rows]).reshape(height, width, planes)
    if info.get("alpha"):
        arr = arr[:, :, :-1]
        planes -= 1
    if planes == 1:
        arr = np.repeat(arr, 3, axis=2)
    return arr


def read_anchor(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == b"\x89PNG\r\n\x1a\n":
        return read_png(path)
    return read_raw_grid(path)


def write_png8(values: np.ndarray, path) -> None:
    u8 = to_uint8(values)
    h, w, c = u8.shape
    with open(path, "wb") as fh:
        png.Writer(width=w, height=h, greyscale=False, bitdepth=8).write(fh, u8.reshape(h, w * c))
