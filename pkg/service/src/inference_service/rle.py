"""Row-major run-length encoding of boolean masks.

Counts alternate starting with the false run, so they always sum to
width * height and an all-false mask encodes as a single count.
"""

from __future__ import annotations

import numpy as np


def encode(mask: np.ndarray) -> dict:
    """RLE dict for a 2-d boolean array."""
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {mask.shape}")
    height, width = mask.shape
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        raise ValueError("mask must be nonempty")
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], edges, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)  # runs alternate starting with the false run
    return {"width": int(width), "height": int(height), "counts": [int(c) for c in counts]}


def decode(rle: dict) -> np.ndarray:
    """Boolean array for an RLE dict produced by encode."""
    width, height = int(rle["width"]), int(rle["height"])
    counts = list(rle["counts"])
    if sum(counts) != width * height:
        raise ValueError(f"counts sum {sum(counts)} != {width}x{height}")
    flat = np.zeros(width * height, dtype=bool)
    pos = 0
    value = False
    for count in counts:
        if value:
            flat[pos : pos + count] = True
        pos += count
        value = not value
    return flat.reshape(height, width)
