"""Filter mosaics as binary PGM/PPM images."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .dictlearn import Dictionary
from .errors import UnsupportedChannelsError


def _normalize_tile(filt: np.ndarray) -> np.ndarray:
    lo, hi = filt.min(), filt.max()
    if hi - lo < 1e-12:
        return np.full_like(filt, 0.5)  # constant filter renders mid-gray
    return (filt - lo) / (hi - lo)


def dump_filter_mosaic(dictionary: Dictionary, path) -> Path:
    """Tile min-max-normalized filters, variance-sorted descending.

    One-pixel black separators; written as binary PGM for single-channel
    filters, PPM for RGB.
    """
    k, c, s, _ = dictionary.filters.shape
    if c not in (1, 3):
        raise UnsupportedChannelsError(f"cannot render {c}-channel filters")
    variances = dictionary.filters.reshape(k, -1).var(axis=1)
    order = np.argsort(-variances, kind="stable")

    cols = math.ceil(math.sqrt(k))
    rows = math.ceil(k / cols)
    height = rows * s + (rows - 1)
    width = cols * s + (cols - 1)
    canvas = np.zeros((height, width, c), dtype=np.float32)
    for slot, idx in enumerate(order):
        r, col = divmod(slot, cols)
        tile = _normalize_tile(dictionary.filters[idx]).transpose(1, 2, 0)
        canvas[r * (s + 1):r * (s + 1) + s,
               col * (s + 1):col * (s + 1) + s] = tile

    data = np.round(canvas * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if c == 1:
        header = f"P5\n{width} {height}\n255\n".encode()
        path.write_bytes(header + data[:, :, 0].tobytes())
    else:
        header = f"P6\n{width} {height}\n255\n".encode()
        path.write_bytes(header + data.tobytes())
    return path
