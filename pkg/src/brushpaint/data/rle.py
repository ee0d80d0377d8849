"""Run-length encoding for binary masks.

Grammar: ``{"size": [H, W], "counts": [n0, n1, ...]}``. The mask is read in
row-major order; counts alternate runs of 0 and 1, starting with a (possibly
empty) run of 0. Counts sum to H*W.
"""

from __future__ import annotations

import numpy as np

from ..errors import DataError


def encode(mask: np.ndarray) -> dict:
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise DataError(f"RLE encodes 2-D masks, got shape {m.shape}")
    flat = m.reshape(-1)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return {"size": [int(m.shape[0]), int(m.shape[1])], "counts": [int(r) for r in runs]}


def decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = rle["counts"]
    if sum(counts) != h * w or any(c < 0 for c in counts):
        raise DataError("RLE counts do not cover the mask")
    vals = np.zeros(len(counts), dtype=bool)
    vals[1::2] = True
    return np.repeat(vals, counts).reshape(h, w)


def tight_bbox(mask: np.ndarray) -> list[int]:
    """[x0, y0, x1, y1] with exclusive upper corner."""
    ys, xs = np.nonzero(np.asarray(mask))
    if ys.size == 0:
        raise DataError("empty mask has no bounding box")
    return [int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1]
