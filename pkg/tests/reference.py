"""Brute-force reference implementations used as test oracles.

Everything here is written for obviousness, not speed: plain loops over
full boolean arrays.  The production code must agree with these exactly.
"""

from __future__ import annotations

import numpy as np


def brute_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = int((a & b).sum())
    union = int((a | b).sum())
    return inter / union if union else 0.0


def brute_overlap_coefficient(a: np.ndarray, b: np.ndarray) -> float:
    smaller = min(int(a.sum()), int(b.sum()))
    if smaller == 0:
        return 0.0
    return int((a & b).sum()) / smaller


def brute_components(arr: np.ndarray, connectivity: int) -> list[np.ndarray]:
    """Flood-fill connected components, returned in no particular order."""
    h, w = arr.shape
    if connectivity == 4:
        offsets = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        offsets = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    seen = np.zeros_like(arr, dtype=bool)
    comps = []
    for sy in range(h):
        for sx in range(w):
            if not arr[sy, sx] or seen[sy, sx]:
                continue
            comp = np.zeros_like(arr, dtype=bool)
            stack = [(sy, sx)]
            seen[sy, sx] = True
            while stack:
                y, x = stack.pop()
                comp[y, x] = True
                for dy, dx in offsets:
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and arr[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
            comps.append(comp)
    return comps


def brute_fill_holes(arr: np.ndarray, max_hole_area: int) -> np.ndarray:
    """Fill 4-connected background pockets that avoid the border and are small."""
    out = arr.copy()
    for comp in brute_components(~arr, 4):
        ys, xs = np.nonzero(comp)
        touches_border = (
            ys.min() == 0
            or xs.min() == 0
            or ys.max() == arr.shape[0] - 1
            or xs.max() == arr.shape[1] - 1
        )
        if not touches_border and comp.sum() <= max_hole_area:
            out |= comp
    return out


def brute_perimeter_edges(arr: np.ndarray) -> int:
    """Count unit edges between true pixels and false-or-off-image pixels."""
    h, w = arr.shape
    edges = 0
    for y in range(h):
        for x in range(w):
            if not arr[y, x]:
                continue
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ny, nx = y + dy, x + dx
                if not (0 <= ny < h and 0 <= nx < w) or not arr[ny, nx]:
                    edges += 1
    return edges


def brute_perimeter_set(arr: np.ndarray) -> np.ndarray:
    h, w = arr.shape
    out = np.zeros_like(arr, dtype=bool)
    for y in range(h):
        for x in range(w):
            if not arr[y, x]:
                continue
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ny, nx = y + dy, x + dx
                if not (0 <= ny < h and 0 <= nx < w) or not arr[ny, nx]:
                    out[y, x] = True
                    break
    return out


def brute_distance_transform(arr: np.ndarray) -> np.ndarray:
    """O(N^2) scan: distance from each true pixel to the nearest
    false-or-off-image pixel center."""
    h, w = arr.shape
    bg = [(y, x) for y in range(h) for x in range(w) if not arr[y, x]]
    # off-image background: one ring around the frame is always nearest
    for x in range(-1, w + 1):
        bg.append((-1, x))
        bg.append((h, x))
    for y in range(h):
        bg.append((y, -1))
        bg.append((y, w))
    bg_arr = np.array(bg, dtype=np.float64)
    out = np.zeros((h, w), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            if arr[y, x]:
                d2 = (bg_arr[:, 0] - y) ** 2 + (bg_arr[:, 1] - x) ** 2
                out[y, x] = np.sqrt(d2.min())
    return out


def random_mask(rng: np.random.Generator, w: int, h: int, density: float | None = None) -> np.ndarray:
    """Random blobby mask: thresholded smoothed noise plus salt."""
    if density is None:
        density = rng.uniform(0.2, 0.8)
    noise = rng.random((h, w))
    k = np.ones((3, 3)) / 9.0
    padded = np.pad(noise, 1, mode="edge")
    sm = np.zeros_like(noise)
    for dy in range(3):
        for dx in range(3):
            sm += k[dy, dx] * padded[dy : dy + h, dx : dx + w]
    return sm < density
