"""Synthetic SEM-like grain micrographs with exact ground truth.

Grains are Voronoi cells of centers drawn from a tiled intensity mixture
(dense tiles give many small cells, sparse tiles a few large ones, so
cell areas come out long-tailed).  Boundaries are carved where a pixel
is close to the bisector of its two nearest centers, then rendered
darker than the grain interiors so they form intensity valleys.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import CannotPlaceError, InvalidConfigError
from .geometry import BitMask, ImageGray, LabelMap
from .rng import keyed_rng

MIN_CENTER_SEPARATION = 2.0  # px
TILE_GRID = 4  # the mixture field is piecewise constant on a 4x4 tile grid
_PLACEMENT_ATTEMPTS_PER_CENTER = 1000
_PIXEL_CHUNK_ROWS = 64
_BLOB_DIMMING = 0.25  # contamination discs multiply intensity by this


@dataclass(frozen=True)
class SynthConfig:
    width: int = 512
    height: int = 512
    n_grains_target: int = 150
    size_mixture: tuple[tuple[float, float], ...] = ((0.85, 1.0), (0.15, 10.0))
    boundary_thickness: float = 2.0
    boundary_darkness: float = 0.6
    grain_contrast_spread: float = 0.25
    illumination_amplitude: float = 0.0
    illumination_wavelength: float = 256.0
    noise_sigma: float = 0.03
    n_contamination_blobs: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        if self.width < 32 or self.height < 32:
            raise InvalidConfigError(
                f"image must be at least 32x32, got {self.width}x{self.height}"
            )
        if self.n_grains_target < 2:
            raise InvalidConfigError(
                f"n_grains_target must be >= 2, got {self.n_grains_target}"
            )
        if not self.size_mixture:
            raise InvalidConfigError("size_mixture must be nonempty")
        for weight, mult in self.size_mixture:
            if weight <= 0 or mult <= 0:
                raise InvalidConfigError(
                    f"mixture components must be positive, got ({weight}, {mult})"
                )
        if self.boundary_thickness < 1:
            raise InvalidConfigError(
                f"boundary_thickness must be >= 1, got {self.boundary_thickness}"
            )
        for name in ("boundary_darkness", "grain_contrast_spread",
                     "illumination_amplitude", "noise_sigma"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise InvalidConfigError(f"{name} must be in [0,1], got {v}")
        if self.illumination_wavelength <= 0:
            raise InvalidConfigError(
                f"illumination_wavelength must be > 0, got {self.illumination_wavelength}"
            )
        if self.n_contamination_blobs < 0:
            raise InvalidConfigError(
                f"n_contamination_blobs must be >= 0, got {self.n_contamination_blobs}"
            )


def sample_grain_centers(cfg: SynthConfig) -> list[tuple[float, float]]:
    """Exactly n_grains_target centers with density shaped by the tile mixture
    and pairwise separation >= 2 px."""
    rng = keyed_rng(cfg.rng_seed, "synth", "centers")
    weights = np.array([w for w, _ in cfg.size_mixture])
    mults = np.array([m for _, m in cfg.size_mixture])
    n_tiles = TILE_GRID * TILE_GRID
    tile_component = rng.choice(len(mults), size=n_tiles, p=weights / weights.sum())
    tile_density = mults[tile_component]
    tile_p = tile_density / tile_density.sum()
    tw = cfg.width / TILE_GRID
    th = cfg.height / TILE_GRID

    accepted = np.empty((0, 2))
    budget = _PLACEMENT_ATTEMPTS_PER_CENTER * cfg.n_grains_target
    while len(accepted) < cfg.n_grains_target:
        if budget <= 0:
            raise CannotPlaceError(
                f"cannot place {cfg.n_grains_target} centers at separation "
                f"{MIN_CENTER_SEPARATION} in {cfg.width}x{cfg.height}"
            )
        budget -= 1
        t = int(rng.choice(n_tiles, p=tile_p))
        ty, tx = divmod(t, TILE_GRID)
        x = (tx + rng.random()) * tw
        y = (ty + rng.random()) * th
        if accepted.size:
            gap = np.hypot(accepted[:, 0] - x, accepted[:, 1] - y).min()
            if gap < MIN_CENTER_SEPARATION:
                continue
        accepted = np.vstack([accepted, (x, y)])
    return [(float(x), float(y)) for x, y in accepted]


def render_labelmap(centers, cfg: SynthConfig) -> LabelMap:
    """Nearest-center labels with a carved boundary band.

    A pixel is boundary when it lies within boundary_thickness/2 of the
    bisector between its two nearest centers.  Carving can split a cell;
    only the largest 4-connected fragment keeps its label.
    """
    pts = np.asarray(centers, dtype=np.float64)
    if len(pts) < 2:
        raise InvalidConfigError(f"need at least 2 centers, got {len(pts)}")
    half_band = cfg.boundary_thickness / 2.0
    lab = np.zeros((cfg.height, cfg.width), dtype=np.int32)
    xs = np.arange(cfg.width, dtype=np.float64)
    for y0 in range(0, cfg.height, _PIXEL_CHUNK_ROWS):
        y1 = min(cfg.height, y0 + _PIXEL_CHUNK_ROWS)
        ys = np.arange(y0, y1, dtype=np.float64)
        dx = xs[None, :, None] - pts[None, None, :, 0]
        dy = ys[:, None, None] - pts[None, None, :, 1]
        d2 = (dx * dx + dy * dy).reshape(-1, len(pts))
        two = np.argpartition(d2, 1, axis=1)[:, :2]
        rows = np.arange(d2.shape[0])
        d_a = d2[rows, two[:, 0]]
        d_b = d2[rows, two[:, 1]]
        swap = (d_b < d_a) | ((d_b == d_a) & (two[:, 1] < two[:, 0]))
        first = np.where(swap, two[:, 1], two[:, 0])
        second = np.where(swap, two[:, 0], two[:, 1])
        d1 = np.minimum(d_a, d_b)
        dsec = np.maximum(d_a, d_b)
        span = np.hypot(
            pts[first, 0] - pts[second, 0], pts[first, 1] - pts[second, 1]
        )
        bisector_dist = (dsec - d1) / (2.0 * span)
        block = np.where(bisector_dist <= half_band, 0, first + 1)
        lab[y0:y1] = block.reshape(y1 - y0, cfg.width)

    # keep only the largest 4-connected fragment of each cell
    out = np.zeros_like(lab)
    next_id = 1
    for idx in range(1, len(pts) + 1):
        cell = lab == idx
        if not cell.any():
            continue
        pieces, n = ndimage.label(cell)
        if n > 1:
            sizes = np.bincount(pieces.ravel())[1:]
            best = int(np.argmax(sizes)) + 1
            cell = pieces == best
        out[cell] = next_id
        next_id += 1
    return LabelMap(out)


def render_image(lm: LabelMap, cfg: SynthConfig) -> ImageGray:
    """Per-grain flat intensities, darkened boundaries, optional illumination
    gradient, contamination discs, and Gaussian noise."""
    rng = keyed_rng(cfg.rng_seed, "synth", "image")
    bases = 0.5 + (rng.random(lm.n_grains) - 0.5) * cfg.grain_contrast_spread
    lab = lm.labels
    grain_base = np.where(lab > 0, bases[np.maximum(lab, 1) - 1], 0.0)
    boundary = lab == 0
    if boundary.any():
        # a boundary pixel darkens the base of its nearest grain pixel
        _, (iy, ix) = ndimage.distance_transform_edt(boundary, return_indices=True)
        nearest_base = grain_base[iy, ix]
        img = np.where(boundary, nearest_base * (1.0 - cfg.boundary_darkness), grain_base)
    else:
        img = grain_base
    if cfg.illumination_amplitude > 0:
        x = np.arange(lm.width, dtype=np.float64)
        band = 1.0 + cfg.illumination_amplitude * np.sin(
            2.0 * np.pi * x / cfg.illumination_wavelength
        )
        img = img * band[None, :]
    for _ in range(cfg.n_contamination_blobs):
        cx = rng.random() * lm.width
        cy = rng.random() * lm.height
        radius = 3.0 + rng.random() * 7.0
        ys, xs2 = np.ogrid[: lm.height, : lm.width]
        disc = (xs2 - cx) ** 2 + (ys - cy) ** 2 <= radius * radius
        img = np.where(disc, img * _BLOB_DIMMING, img)
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
    return ImageGray(np.clip(img, 0.0, 1.0))


def generate(cfg: SynthConfig) -> tuple[LabelMap, ImageGray]:
    """One micrograph with ground truth, bit-reproducible given the config."""
    lm = render_labelmap(sample_grain_centers(cfg), cfg)
    return lm, render_image(lm, cfg)


def boundary_mask_true(lm: LabelMap) -> BitMask:
    """The ground-truth boundary pixels (label 0)."""
    return BitMask.from_array(lm.labels == 0)
