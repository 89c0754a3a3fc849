"""Exact binary-mask geometry: encoding, overlap metrics, morphology, and
per-grain shape properties.

Masks are stored as a tight bounding-box patch plus an origin so that
overlap tests between instance masks cost O(bbox) rather than O(image).
All operations are pure; nothing here mutates its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import (
    DataMismatchError,
    DimensionMismatchError,
    EmptyMaskError,
    GapInIdsError,
    MalformedRleError,
)

# 4- and 8-neighborhood structuring elements for scipy.ndimage.label
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_SQUARE = np.ones((3, 3), dtype=bool)

# diagonal pad keeping the moment matrix positive definite on 1-px-thin
# masks: 1/12 unit-pixel extent plus an equal 1/12 regularizer, so a solid
# n-pixel side contributes (n^2 + 1)/12
_MOMENT_DIAG_PAD = 1.0 / 6.0


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return _CROSS
    if connectivity == 8:
        return _SQUARE
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


@dataclass(frozen=True)
class ImageGray:
    """Grayscale image with intensities in [0, 1]."""

    pixels: np.ndarray  # float64, shape (height, width)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image must be a nonempty 2-d grid, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("image intensities must be finite and within [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


class BitMask:
    """Binary instance mask over a width x height pixel grid.

    Internally holds only the tight bounding-box patch; ``to_array`` gives
    the full row-major boolean grid.  The empty mask has area 0 and the
    sentinel bbox (0, 0, 0, 0).
    """

    __slots__ = ("width", "height", "_patch", "_ox", "_oy", "area")

    def __init__(self, width: int, height: int, patch: np.ndarray, origin: tuple[int, int]):
        if width < 1 or height < 1:
            raise ValueError(f"mask grid must be nonempty, got {width}x{height}")
        self.width = int(width)
        self.height = int(height)
        self._patch = patch
        self._ox, self._oy = int(origin[0]), int(origin[1])
        self.area = int(patch.sum())

    @classmethod
    def from_array(cls, arr: np.ndarray) -> BitMask:
        arr = np.asarray(arr, dtype=bool)
        if arr.ndim != 2:
            raise ValueError(f"mask array must be 2-d, got shape {arr.shape}")
        h, w = arr.shape
        rows = np.flatnonzero(arr.any(axis=1))
        if rows.size == 0:
            return cls.empty(w, h)
        cols = np.flatnonzero(arr.any(axis=0))
        y0, y1 = int(rows[0]), int(rows[-1]) + 1
        x0, x1 = int(cols[0]), int(cols[-1]) + 1
        return cls(w, h, arr[y0:y1, x0:x1].copy(), (x0, y0))

    @classmethod
    def empty(cls, width: int, height: int) -> BitMask:
        return cls(width, height, np.zeros((0, 0), dtype=bool), (0, 0))

    @classmethod
    def full(cls, width: int, height: int) -> BitMask:
        return cls(width, height, np.ones((height, width), dtype=bool), (0, 0))

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """Tight half-open (x0, y0, x1, y1); (0, 0, 0, 0) when empty."""
        if self.area == 0:
            return (0, 0, 0, 0)
        ph, pw = self._patch.shape
        return (self._ox, self._oy, self._ox + pw, self._oy + ph)

    def to_array(self) -> np.ndarray:
        out = np.zeros((self.height, self.width), dtype=bool)
        if self.area:
            x0, y0, x1, y1 = self.bbox
            out[y0:y1, x0:x1] = self._patch
        return out

    def padded_patch(self) -> tuple[np.ndarray, int, int]:
        """Patch with a 1-px false ring; everything beyond the tight bbox
        (other image pixels and off-image space alike) is background."""
        return np.pad(self._patch, 1), self._ox - 1, self._oy - 1

    def paint_into(self, canvas: np.ndarray) -> None:
        """OR this mask onto a full-frame boolean canvas."""
        if canvas.shape != (self.height, self.width):
            raise DimensionMismatchError(
                f"canvas {canvas.shape} vs mask {self.height}x{self.width}"
            )
        if self.area:
            x0, y0, x1, y1 = self.bbox
            canvas[y0:y1, x0:x1] |= self._patch

    def same_grid(self, other: BitMask) -> bool:
        return self.width == other.width and self.height == other.height

    def contains_point(self, x: int, y: int) -> bool:
        x0, y0, x1, y1 = self.bbox
        if not (x0 <= x < x1 and y0 <= y < y1):
            return False
        return bool(self._patch[y - self._oy, x - self._ox])

    def translate(self, dx: int, dy: int, width: int, height: int) -> BitMask:
        """Re-embed the patch into a (width, height) grid shifted by (dx, dy),
        clipping whatever falls outside."""
        if self.area == 0:
            return BitMask.empty(width, height)
        x0, y0, x1, y1 = self.bbox
        nx0, ny0, nx1, ny1 = x0 + dx, y0 + dy, x1 + dx, y1 + dy
        cx0, cy0 = max(nx0, 0), max(ny0, 0)
        cx1, cy1 = min(nx1, width), min(ny1, height)
        if cx0 >= cx1 or cy0 >= cy1:
            return BitMask.empty(width, height)
        patch = self._patch[cy0 - ny0 : cy1 - ny0, cx0 - nx0 : cx1 - nx0]
        return BitMask.from_array_patch(width, height, patch, (cx0, cy0))

    @classmethod
    def from_array_patch(
        cls, width: int, height: int, patch: np.ndarray, origin: tuple[int, int]
    ) -> BitMask:
        """Build from a possibly loose patch, re-tightening the bbox."""
        patch = np.asarray(patch, dtype=bool)
        rows = np.flatnonzero(patch.any(axis=1))
        if rows.size == 0:
            return cls.empty(width, height)
        cols = np.flatnonzero(patch.any(axis=0))
        y0, y1 = int(rows[0]), int(rows[-1]) + 1
        x0, x1 = int(cols[0]), int(cols[-1]) + 1
        tight = patch[y0:y1, x0:x1]
        if not tight.flags.owndata or tight.base is not None:
            tight = tight.copy()
        return cls(width, height, tight, (origin[0] + x0, origin[1] + y0))

    def _windows(self, other: BitMask) -> tuple[np.ndarray, np.ndarray] | None:
        """Aligned patch views over the bbox intersection, or None."""
        ax0, ay0, ax1, ay1 = self.bbox
        bx0, by0, bx1, by1 = other.bbox
        ix0, iy0 = max(ax0, bx0), max(ay0, by0)
        ix1, iy1 = min(ax1, bx1), min(ay1, by1)
        if ix0 >= ix1 or iy0 >= iy1:
            return None
        wa = self._patch[iy0 - self._oy : iy1 - self._oy, ix0 - self._ox : ix1 - self._ox]
        wb = other._patch[iy0 - other._oy : iy1 - other._oy, ix0 - other._ox : ix1 - other._ox]
        return wa, wb

    def intersection_area(self, other: BitMask) -> int:
        if self.area == 0 or other.area == 0:
            return 0
        win = self._windows(other)
        if win is None:
            return 0
        return int((win[0] & win[1]).sum())

    def union(self, other: BitMask) -> BitMask:
        if not self.same_grid(other):
            raise DimensionMismatchError(
                f"mask grids differ: {self.width}x{self.height} vs {other.width}x{other.height}"
            )
        if self.area == 0:
            return other
        if other.area == 0:
            return self
        ax0, ay0, ax1, ay1 = self.bbox
        bx0, by0, bx1, by1 = other.bbox
        x0, y0 = min(ax0, bx0), min(ay0, by0)
        x1, y1 = max(ax1, bx1), max(ay1, by1)
        patch = np.zeros((y1 - y0, x1 - x0), dtype=bool)
        patch[ay0 - y0 : ay1 - y0, ax0 - x0 : ax1 - x0] = self._patch
        patch[by0 - y0 : by1 - y0, bx0 - x0 : bx1 - x0] |= other._patch
        return BitMask(self.width, self.height, patch, (x0, y0))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BitMask):
            return NotImplemented
        if not self.same_grid(other) or self.area != other.area or self.bbox != other.bbox:
            return False
        return bool(np.array_equal(self._patch, other._patch))

    def __hash__(self):  # pragma: no cover - identity hashing is enough
        return object.__hash__(self)

    def __repr__(self) -> str:
        return f"BitMask({self.width}x{self.height}, area={self.area}, bbox={self.bbox})"


@dataclass(frozen=True)
class SoftMask:
    """Pre-binarization score grid with its binarization cutoff."""

    logits: np.ndarray  # float, shape (height, width)
    tau: float = 0.0

    def __post_init__(self):
        lg = np.asarray(self.logits, dtype=np.float64)
        if lg.ndim != 2 or lg.shape[0] < 1 or lg.shape[1] < 1:
            raise ValueError(f"logits must be a nonempty 2-d grid, got shape {lg.shape}")
        if not np.all(np.isfinite(lg)):
            raise ValueError("logits must be finite")
        object.__setattr__(self, "logits", lg)

    @property
    def width(self) -> int:
        return self.logits.shape[1]

    @property
    def height(self) -> int:
        return self.logits.shape[0]


@dataclass(frozen=True)
class RleMask:
    """Run-length encoding over the row-major flattening.

    Runs alternate starting with a background run; only the first count may
    be zero.
    """

    width: int
    height: int
    counts: tuple[int, ...]

    def to_json_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "counts": list(self.counts)}

    @classmethod
    def from_json_dict(cls, obj: dict) -> RleMask:
        try:
            return cls(int(obj["width"]), int(obj["height"]), tuple(int(c) for c in obj["counts"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedRleError(f"bad rle object: {exc}") from exc


def rle_encode(mask: BitMask) -> RleMask:
    """Encode a mask as alternating false/true run lengths, row-major."""
    flat = mask.to_array().ravel()
    n = flat.size
    if mask.area == 0:
        return RleMask(mask.width, mask.height, (n,))
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    edges = np.concatenate(([0], boundaries, [n]))
    runs = np.diff(edges)
    counts = tuple(int(c) for c in runs)
    if flat[0]:
        counts = (0,) + counts
    return RleMask(mask.width, mask.height, counts)


def rle_decode(rle: RleMask) -> BitMask:
    """Decode run lengths back to a mask; rejects malformed counts."""
    n = rle.width * rle.height
    counts = rle.counts
    if any(c < 0 for c in counts):
        raise MalformedRleError(f"negative run length in {counts}")
    total = sum(counts)
    if total != n:
        raise MalformedRleError(
            f"counts sum to {total} but grid {rle.width}x{rle.height} has {n} pixels"
        )
    if any(c == 0 for c in counts[1:]):
        raise MalformedRleError("zero-length run after the first count")
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return BitMask.from_array(flat.reshape(rle.height, rle.width))


def iou(a: BitMask, b: BitMask) -> float:
    """|a∩b| / |a∪b|; 0 when both masks are empty."""
    if not a.same_grid(b):
        raise DimensionMismatchError(
            f"mask grids differ: {a.width}x{a.height} vs {b.width}x{b.height}"
        )
    inter = a.intersection_area(b)
    union = a.area + b.area - inter
    return inter / union if union else 0.0


def overlap_coefficient(a: BitMask, b: BitMask) -> float:
    """|a∩b| / min(|a|, |b|); 0 when either mask is empty."""
    if not a.same_grid(b):
        raise DimensionMismatchError(
            f"mask grids differ: {a.width}x{a.height} vs {b.width}x{b.height}"
        )
    smaller = min(a.area, b.area)
    if smaller == 0:
        return 0.0
    return a.intersection_area(b) / smaller


def connected_components(mask: BitMask, connectivity: int = 4) -> list[BitMask]:
    """Split into connected components, largest first (row-major tiebreak)."""
    if mask.area == 0:
        return []
    labeled, n = ndimage.label(mask._patch, structure=_structure(connectivity))
    comps = []
    for sl, lab in zip(ndimage.find_objects(labeled), range(1, n + 1)):
        sub = labeled[sl] == lab
        ox = mask._ox + sl[1].start
        oy = mask._oy + sl[0].start
        comp = BitMask(mask.width, mask.height, sub, (ox, oy))
        first = np.flatnonzero(sub.ravel())[0]
        fy, fx = divmod(int(first), sub.shape[1])
        comps.append(((-comp.area, (oy + fy) * mask.width + ox + fx), comp))
    comps.sort(key=lambda item: item[0])
    return [comp for _, comp in comps]


def remove_small_components(mask: BitMask, min_area: int) -> BitMask:
    """Keep only connected components (4-conn) with area >= min_area."""
    if min_area < 0:
        raise ValueError(f"min_area must be >= 0, got {min_area}")
    if mask.area == 0 or min_area <= 1:
        return mask
    labeled, n = ndimage.label(mask._patch, structure=_CROSS)
    if n == 0:
        return mask
    sizes = np.bincount(labeled.ravel(), minlength=n + 1)
    keep = sizes >= min_area
    keep[0] = False
    kept = keep[labeled]
    return BitMask.from_array_patch(mask.width, mask.height, kept, (mask._ox, mask._oy))


def fill_holes(mask: BitMask, max_hole_area: int) -> BitMask:
    """Fill enclosed background pockets of area <= max_hole_area.

    Background components (4-connected) that touch the image border are
    never filled; neither is anything connected to the space outside the
    mask's bounding box, which always reaches the border.
    """
    if max_hole_area < 0:
        raise ValueError(f"max_hole_area must be >= 0, got {max_hole_area}")
    if mask.area == 0 or max_hole_area == 0:
        return mask
    padded, _, _ = mask.padded_patch()
    inv = ~padded
    labeled, n = ndimage.label(inv, structure=_CROSS)
    if n == 0:
        return mask
    border = np.unique(
        np.concatenate([labeled[0], labeled[-1], labeled[:, 0], labeled[:, -1]])
    )
    sizes = np.bincount(labeled.ravel(), minlength=n + 1)
    fill = sizes <= max_hole_area
    fill[0] = False
    fill[border] = False
    if not fill.any():
        return mask
    out = padded | fill[labeled]
    return BitMask.from_array_patch(
        mask.width, mask.height, out[1:-1, 1:-1], (mask._ox, mask._oy)
    )


def perimeter_set(mask: BitMask) -> BitMask:
    """Mask pixels with at least one 4-neighbor that is false or off-image."""
    if mask.area == 0:
        return mask
    p, _, _ = mask.padded_patch()
    core = p[1:-1, 1:-1]
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return BitMask.from_array_patch(
        mask.width, mask.height, core & ~interior, (mask._ox, mask._oy)
    )


def perimeter_edge_count(mask: BitMask) -> int:
    """Unit pixel edges between true and false-or-off-image pixels."""
    if mask.area == 0:
        return 0
    p, _, _ = mask.padded_patch()
    core = p[1:-1, 1:-1]
    exposed = (
        (core & ~p[:-2, 1:-1]).sum()
        + (core & ~p[2:, 1:-1]).sum()
        + (core & ~p[1:-1, :-2]).sum()
        + (core & ~p[1:-1, 2:]).sum()
    )
    return int(exposed)


def distance_transform(mask: BitMask) -> np.ndarray:
    """Exact Euclidean distance from each true pixel center to the nearest
    false-or-off-image pixel center; 0 on false pixels."""
    out = np.zeros((mask.height, mask.width), dtype=np.float64)
    if mask.area == 0:
        return out
    padded, _, _ = mask.padded_patch()
    dist = ndimage.distance_transform_edt(padded)
    x0, y0, x1, y1 = mask.bbox
    out[y0:y1, x0:x1] = dist[1:-1, 1:-1]
    return out


def binarize(soft: SoftMask, tau: float) -> BitMask:
    """Threshold logits at tau (inclusive)."""
    return BitMask.from_array(soft.logits >= tau)


def stability_score(soft: SoftMask, tau: float, delta: float) -> float:
    """IoU between the binarizations at tau+delta and tau-delta.

    Both-empty thresholdings score 0: a prediction entirely below cutoff
    carries no confident foreground and must not pass stability filtering.
    """
    if delta <= 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    return iou(binarize(soft, tau + delta), binarize(soft, tau - delta))


@dataclass(frozen=True)
class GrainProps:
    """Shape summary of one grain instance."""

    grain_id: int
    area: int
    perimeter: int
    elongatedness: float
    centroid: tuple[float, float]
    bbox: tuple[int, int, int, int]


def grain_properties(mask: BitMask, grain_id: int = 0) -> GrainProps:
    """Area, edge-count perimeter, moment-ratio elongatedness, centroid, bbox."""
    if mask.area == 0:
        raise EmptyMaskError("grain_properties needs a nonempty mask")
    ys, xs = np.nonzero(mask._patch)
    xs = xs.astype(np.float64) + mask._ox
    ys = ys.astype(np.float64) + mask._oy
    cx, cy = float(xs.mean()), float(ys.mean())
    dx, dy = xs - cx, ys - cy
    mxx = float((dx * dx).mean()) + _MOMENT_DIAG_PAD
    myy = float((dy * dy).mean()) + _MOMENT_DIAG_PAD
    mxy = float((dx * dy).mean())
    half_trace = 0.5 * (mxx + myy)
    radius = float(np.hypot(0.5 * (mxx - myy), mxy))
    lo = half_trace - radius
    hi = half_trace + radius
    return GrainProps(
        grain_id=grain_id,
        area=mask.area,
        perimeter=perimeter_edge_count(mask),
        elongatedness=float(np.sqrt(hi / lo)),
        centroid=(cx, cy),
        bbox=mask.bbox,
    )


@dataclass
class LabelMap:
    """Integer instance labeling: 0 = boundary/unassigned, k >= 1 = grain."""

    labels: np.ndarray = field(repr=False)  # int32, shape (height, width)

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2 or lab.shape[0] < 1 or lab.shape[1] < 1:
            raise ValueError(f"labels must be a nonempty 2-d grid, got shape {lab.shape}")
        if lab.min() < 0:
            raise ValueError("labels must be non-negative")
        self.labels = lab.astype(np.int32, copy=False)
        present = np.unique(self.labels)
        ids = present[present > 0]
        self.n_grains = int(ids[-1]) if ids.size else 0
        if ids.size != self.n_grains:
            missing = sorted(set(range(1, self.n_grains + 1)) - set(int(i) for i in ids))
            raise GapInIdsError(f"grain ids must be contiguous 1..K; missing {missing}")

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    def label_at(self, x: int, y: int) -> int:
        return int(self.labels[y, x])

    def check_connectivity(self) -> None:
        """Raise if any grain's pixel set is not 4-connected."""
        for grain_id, mask in labelmap_to_masks(self):
            _, n = ndimage.label(mask._patch, structure=_CROSS)
            if n != 1:
                raise DataMismatchError(
                    f"grain {grain_id} splits into {n} 4-connected pieces"
                )


def labelmap_to_masks(lm: LabelMap) -> list[tuple[int, BitMask]]:
    """One (grain_id, mask) per grain, ids ascending; masks pairwise disjoint."""
    if lm.n_grains == 0:
        return []
    slices = ndimage.find_objects(lm.labels, max_label=lm.n_grains)
    out = []
    for grain_id, sl in enumerate(slices, start=1):
        if sl is None:
            raise GapInIdsError(f"grain id {grain_id} has no pixels")
        patch = lm.labels[sl] == grain_id
        out.append(
            (grain_id, BitMask(lm.width, lm.height, patch, (sl[1].start, sl[0].start)))
        )
    return out
