"""Multi-scale dark-valley detection and the Edge Alignment score.

The response at each pixel is the best scale-normalized (gamma = 2)
positive Hessian eigenvalue of the Gaussian-smoothed image: dark lines
curve upward across the line, so only positive curvature contributes.
Bright ridges score zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import ceil

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatchError, IoError
from .geometry import BitMask, ImageGray, overlap_coefficient, perimeter_set

DEFAULT_SCALES = (1.0, 2.0, 3.0)
DEFAULT_DILATION_RADIUS = 1.0


@dataclass(frozen=True)
class ValleyResponse:
    response: np.ndarray  # float64, >= 0, shape (height, width)
    scales_used: tuple[float, ...]

    @property
    def width(self) -> int:
        return self.response.shape[1]

    @property
    def height(self) -> int:
        return self.response.shape[0]


@dataclass(frozen=True)
class BoundaryMask:
    mask: BitMask
    threshold_method: str
    dilation_radius: float
    degenerate: bool = False  # all-zero response produced an empty mask


def _gaussian_smooth(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian with a truncated kernel of half-width ceil(4*sigma)
    and reflective border handling."""
    half = ceil(4.0 * sigma)
    x = np.arange(-half, half + 1, dtype=np.float64)
    kernel = np.exp(-(x * x) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()
    out = ndimage.correlate1d(img, kernel, axis=0, mode="reflect")
    return ndimage.correlate1d(out, kernel, axis=1, mode="reflect")


def _hessian_larger_eigenvalue(smoothed: np.ndarray) -> np.ndarray:
    """Larger-magnitude eigenvalue of the central-difference Hessian."""
    p = np.pad(smoothed, 1, mode="symmetric")
    core = p[1:-1, 1:-1]
    ixx = p[1:-1, 2:] - 2.0 * core + p[1:-1, :-2]
    iyy = p[2:, 1:-1] - 2.0 * core + p[:-2, 1:-1]
    ixy = (p[2:, 2:] - p[2:, :-2] - p[:-2, 2:] + p[:-2, :-2]) / 4.0
    half_trace = 0.5 * (ixx + iyy)
    radius = np.hypot(0.5 * (ixx - iyy), ixy)
    lo = half_trace - radius
    hi = half_trace + radius
    return np.where(np.abs(hi) >= np.abs(lo), hi, lo)


def sato_response(img: ImageGray, scales: tuple[float, ...] = DEFAULT_SCALES) -> ValleyResponse:
    """Per-pixel max over scales of sigma^2 * positive Hessian eigenvalue."""
    scales = tuple(float(s) for s in scales)
    if not scales:
        raise ValueError("scales must be nonempty")
    if any(s <= 0 for s in scales):
        raise ValueError(f"all scales must be > 0, got {scales}")
    best = np.zeros_like(img.pixels)
    for sigma in scales:
        lam = _hessian_larger_eigenvalue(_gaussian_smooth(img.pixels, sigma))
        np.maximum(best, (sigma * sigma) * np.maximum(lam, 0.0), out=best)
    return ValleyResponse(response=best, scales_used=scales)


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Otsu's between-class-variance threshold over a 1-d sample.

    Returns the lower edge of the first above-threshold bin, so thresholding
    with >= keeps exactly the upper class.
    """
    values = np.asarray(values, dtype=np.float64)
    hist, edges = np.histogram(values, bins=bins)
    total = hist.sum()
    if total == 0:
        return float("inf")
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = total - w0
    sum0 = np.cumsum(hist * centers)
    mu0 = np.divide(sum0, w0, out=np.zeros_like(sum0), where=w0 > 0)
    mu1 = np.divide(sum0[-1] - sum0, w1, out=np.zeros_like(sum0), where=w1 > 0)
    variance = w0 * w1 * (mu0 - mu1) ** 2
    variance[-1] = -1.0  # a split must leave the upper class nonempty
    split = int(np.argmax(variance))
    return float(edges[split + 1])


def dilate_by_disc(mask: BitMask, radius: float) -> BitMask:
    """Morphological dilation by a Euclidean disc of the given radius."""
    if radius < 0:
        raise ValueError(f"dilation radius must be >= 0, got {radius}")
    if radius == 0 or mask.area == 0:
        return mask
    dist_to_mask = ndimage.distance_transform_edt(~mask.to_array())
    return BitMask.from_array(dist_to_mask <= radius)


def erode_by_disc(mask: BitMask, radius: float) -> BitMask:
    """Morphological erosion by a Euclidean disc.

    Pixels beyond the image border count as foreground, so a region
    flush against the border only erodes from its interior edges.
    """
    if radius < 0:
        raise ValueError(f"erosion radius must be >= 0, got {radius}")
    if radius == 0 or mask.area == 0:
        return mask
    if mask.area == mask.width * mask.height:
        return mask
    return BitMask.from_array(ndimage.distance_transform_edt(mask.to_array()) > radius)


def boundary_mask(
    resp: ValleyResponse,
    method: str = "otsu",
    quantile: float | None = None,
    dilation_radius: float = DEFAULT_DILATION_RADIUS,
) -> BoundaryMask:
    """Threshold the valley response and dilate into a boundary mask.

    Otsu runs over the strictly-positive response values; the quantile
    method uses the q-quantile of all values.  An all-zero response gives
    an empty mask flagged degenerate.
    """
    flat = resp.response.ravel()
    if method == "otsu":
        positive = flat[flat > 0]
        if positive.size == 0:
            return BoundaryMask(
                BitMask.empty(resp.width, resp.height), "otsu", dilation_radius, degenerate=True
            )
        threshold = otsu_threshold(positive)
        label = "otsu"
    elif method == "quantile":
        if quantile is None or not (0.0 < quantile < 1.0):
            raise ValueError(f"quantile must be in (0, 1), got {quantile}")
        threshold = float(np.quantile(flat, quantile))
        label = f"quantile({quantile})"
        if not flat.max() > 0:
            return BoundaryMask(
                BitMask.empty(resp.width, resp.height), label, dilation_radius, degenerate=True
            )
        if threshold <= 0:
            # all-values quantile can land in the zero mass; keep only real response
            threshold = np.nextafter(0.0, 1.0)
    else:
        raise ValueError(f"unknown threshold method {method!r}")
    raw = BitMask.from_array(resp.response >= threshold)
    if raw.area == 0:
        return BoundaryMask(raw, label, dilation_radius, degenerate=True)
    return BoundaryMask(dilate_by_disc(raw, dilation_radius), label, dilation_radius)


def edge_alignment(candidate: BitMask, boundary: BoundaryMask) -> float:
    """Overlap coefficient between the candidate's perimeter pixels and the
    boundary mask."""
    if not candidate.same_grid(boundary.mask):
        raise DimensionMismatchError(
            f"candidate {candidate.width}x{candidate.height} vs "
            f"boundary {boundary.mask.width}x{boundary.mask.height}"
        )
    return overlap_coefficient(perimeter_set(candidate), boundary.mask)


_HEADER = struct.Struct("<II")


def save_response_field(path, resp: ValleyResponse) -> None:
    """Binary debug dump: u32le width, u32le height, then f32le row-major grid."""
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(resp.width, resp.height))
            fh.write(resp.response.astype("<f4").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write response field {path}: {exc}") from exc


def load_response_field(path) -> ValleyResponse:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read response field {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise IoError(f"response field {path} is truncated")
    width, height = _HEADER.unpack_from(raw)
    grid = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if grid.size != width * height:
        raise IoError(
            f"response field {path}: {grid.size} values for {width}x{height} grid"
        )
    return ValleyResponse(
        response=grid.reshape(height, width).astype(np.float64), scales_used=()
    )
