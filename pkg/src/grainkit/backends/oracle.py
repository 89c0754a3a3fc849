"""Ground-truth-driven backend with configurable corruption.

Emulates a promptable segmenter against a known labelmap.  All randomness
is drawn from a counter-based generator keyed by (seed, image id, prompt
digest), so results never depend on call order or concurrency.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..errors import DataMismatchError, InvalidPromptError
from ..geometry import BitMask, ImageGray, LabelMap, iou, labelmap_to_masks
from ..rng import keyed_rng
from ..valley import dilate_by_disc, erode_by_disc
from .base import (
    Backend,
    Box,
    CorruptionConfig,
    Prompt,
    ScoredMask,
    crop_handle,
    point_pixel,
    prompt_digest,
    validate_prompt,
)

AMBIGUITY_SEARCH_RADIUS = 6  # px; boundary bands in the synthetic maps are thinner
ADJACENCY_BAND = 3.0  # px; spans directly-touching grains and thin boundary bands


@dataclass(frozen=True)
class _Registered:
    labelmap: LabelMap
    grain_masks: tuple[BitMask, ...]  # index k-1 = grain k, full frame
    grain_areas: tuple[int, ...]
    neighbors: tuple[tuple[int, ...], ...]  # adjacent grain ids per grain


@dataclass(frozen=True)
class _View:
    image_id: str
    reg: _Registered
    crop: Box  # always concrete; full frame when no crop was requested


def _adjacency(lm: LabelMap, band: float = ADJACENCY_BAND) -> tuple[tuple[int, ...], ...]:
    """Grain pairs within `band` px of each other: 8-adjacent neighbors plus
    pairs separated only by a thin boundary band."""
    lab = lm.labels
    h, w = lab.shape
    pad = int(math.ceil(band)) + 1
    out: list[set[int]] = [set() for _ in range(lm.n_grains + 1)]
    for gid, mask in labelmap_to_masks(lm):
        x0, y0, x1, y1 = mask.bbox
        wy0, wy1 = max(0, y0 - pad), min(h, y1 + pad)
        wx0, wx1 = max(0, x0 - pad), min(w, x1 + pad)
        window = lab[wy0:wy1, wx0:wx1]
        near = ndimage.distance_transform_edt(window != gid) <= band
        for other in np.unique(window[near & (window > 0) & (window != gid)]):
            out[gid].add(int(other))
            out[int(other)].add(gid)
    return tuple(tuple(sorted(s)) for s in out)


class OracleBackend(Backend):
    """Perfect segmenter over registered labelmaps, degraded on request."""

    backend_id = "oracle"

    def __init__(self, cfg: CorruptionConfig | None = None):
        self.cfg = cfg if cfg is not None else CorruptionConfig()
        self._registered: dict[str, _Registered] = {}
        self._views: dict[str, _View] = {}
        self._lock = threading.Lock()

    def register(self, image_id: str, labelmap: LabelMap) -> None:
        masks = labelmap_to_masks(labelmap)
        reg = _Registered(
            labelmap=labelmap,
            grain_masks=tuple(m for _, m in masks),
            grain_areas=tuple(m.area for _, m in masks),
            neighbors=_adjacency(labelmap),
        )
        with self._lock:
            self._registered[image_id] = reg

    def open(self, image_id: str, image: ImageGray, crop: Box | None = None) -> str:
        with self._lock:
            reg = self._registered.get(image_id)
        if reg is None:
            raise DataMismatchError(f"no labelmap registered for image {image_id!r}")
        lm = reg.labelmap
        if (image.width, image.height) != (lm.width, lm.height):
            raise DataMismatchError(
                f"image {image.width}x{image.height} vs labelmap {lm.width}x{lm.height}"
            )
        box = crop if crop is not None else (0, 0, lm.width, lm.height)
        x0, y0, x1, y1 = box
        if not (0 <= x0 < x1 <= lm.width and 0 <= y0 < y1 <= lm.height):
            raise InvalidPromptError(f"crop {crop} outside {lm.width}x{lm.height}")
        handle = crop_handle(image_id, crop)
        with self._lock:
            self._views[handle] = _View(image_id=image_id, reg=reg, crop=box)
        return handle

    def predict(self, handle: str, prompt: Prompt) -> list[ScoredMask]:
        with self._lock:
            view = self._views.get(handle)
        if view is None:
            raise DataMismatchError(f"unknown image handle {handle!r}")
        x0, y0, x1, y1 = view.crop
        cw, ch = x1 - x0, y1 - y0
        validate_prompt(prompt, cw, ch)
        digest = prompt_digest(prompt)
        provenance = (digest, handle, self.backend_id)

        fg = prompt.foreground_points()
        if fg:
            px, py = point_pixel(fg[0][0] + x0, fg[0][1] + y0)
            grain = view.reg.labelmap.label_at(px, py)
            if grain == 0:
                return self._ambiguity(view, px, py, prompt, provenance)
        elif prompt.box is not None:
            grain = self._box_grain(view, prompt.box)
        else:
            raise InvalidPromptError("oracle needs a foreground point or a box")
        return self._corrupted(view, grain, prompt, digest, provenance)

    def _clip(self, view: _View, mask: BitMask) -> BitMask:
        """Full frame -> crop frame."""
        x0, y0, x1, y1 = view.crop
        if (x0, y0) == (0, 0) and (x1, y1) == (mask.width, mask.height):
            return mask
        return mask.translate(-x0, -y0, x1 - x0, y1 - y0)

    def _box_grain(self, view: _View, box: Box) -> int:
        x0, y0, x1, y1 = view.crop
        bx0, by0, bx1, by1 = box
        full = (bx0 + x0, by0 + y0, bx1 + x0, by1 + y0)
        best_iou, best = 0.0, 0
        for gid, m in enumerate(view.reg.grain_masks, start=1):
            gx0, gy0, gx1, gy1 = m.bbox
            ix = max(0, min(gx1, full[2]) - max(gx0, full[0]))
            iy = max(0, min(gy1, full[3]) - max(gy0, full[1]))
            inter = ix * iy
            union = (gx1 - gx0) * (gy1 - gy0) + (full[2] - full[0]) * (full[3] - full[1]) - inter
            score = inter / union if union else 0.0
            if score > best_iou:
                best_iou, best = score, gid
        if best:
            return best
        # no bbox overlaps at all: fall back to the label under the box center
        cx = min(view.reg.labelmap.width - 1, (full[0] + full[2]) // 2)
        cy = min(view.reg.labelmap.height - 1, (full[1] + full[3]) // 2)
        grain = view.reg.labelmap.label_at(cx, cy)
        if grain == 0:
            raise InvalidPromptError(f"box {box} selects no grain")
        return grain

    def _ambiguity(
        self, view: _View, px: int, py: int, prompt: Prompt, provenance
    ) -> list[ScoredMask]:
        """Boundary-pixel point: the two nearest grains and their union."""
        lab = view.reg.labelmap.labels
        h, w = lab.shape
        r = AMBIGUITY_SEARCH_RADIUS
        wy0, wy1 = max(0, py - r), min(h, py + r + 1)
        wx0, wx1 = max(0, px - r), min(w, px + r + 1)
        window = lab[wy0:wy1, wx0:wx1]
        ys, xs = np.nonzero(window)
        if ys.size == 0:
            raise InvalidPromptError(f"point ({px}, {py}) is in no grain")
        dists = np.hypot(ys + wy0 - py, xs + wx0 - px)
        best: dict[int, float] = {}
        for d, gid in zip(dists, window[ys, xs]):
            gid = int(gid)
            if d < best.get(gid, math.inf):
                best[gid] = float(d)
        ranked = sorted(best.items(), key=lambda kv: (kv[1], kv[0]))
        if len(ranked) == 1:
            # edge of a lone grain: treat as an ordinary in-grain prediction
            return self._corrupted(view, ranked[0][0], prompt, provenance[0], provenance)
        ga, gb = ranked[0][0], ranked[1][0]
        ma = view.reg.grain_masks[ga - 1]
        mb = view.reg.grain_masks[gb - 1]
        if prompt.multimask:
            picks = [ma, mb, ma.union(mb)]
        else:
            larger = ma if (ma.area, -ga) >= (mb.area, -gb) else mb
            picks = [larger]
        return [
            ScoredMask(
                mask=self._clip(view, m),
                predicted_iou=0.5,
                stability=1.0,
                provenance=provenance,
            )
            for m in picks
        ]

    def _corrupted(
        self, view: _View, grain: int, prompt: Prompt, digest: str, provenance
    ) -> list[ScoredMask]:
        cfg = self.cfg
        reg = view.reg
        rng = keyed_rng(cfg.rng_seed, "oracle", view.image_id, digest)
        base = reg.grain_masks[grain - 1]
        reference = self._clip(view, base)  # what an honest score is measured against

        u_miss = rng.random()
        if u_miss < cfg.p_miss:
            empty = BitMask.empty(reference.width, reference.height)
            low = 0.1 * rng.random()
            miss = ScoredMask(empty, predicted_iou=low, stability=0.0, provenance=provenance)
            return [miss] * 3 if prompt.multimask else [miss]

        u_merge = rng.random()
        u_split = rng.random()
        theta = rng.random() * 2.0 * math.pi
        u_dir = rng.random()
        radius = rng.random() * cfg.boundary_jitter

        nb = self._largest_neighbor(reg, grain)
        merged = base.union(reg.grain_masks[nb - 1]) if nb else base

        working = base
        if nb and u_merge < cfg.p_merge_low_contrast:
            if not cfg.asymmetric_merge or reg.grain_areas[grain - 1] > reg.grain_areas[nb - 1]:
                working = merged
        if u_split < cfg.p_split_texture:
            working = _half_plane_cut(working, base, theta)
        if cfg.boundary_jitter > 0:
            if u_dir < 0.5:
                working = dilate_by_disc(working, radius)
            else:
                working = erode_by_disc(working, radius)

        def score(mask_crop: BitMask) -> float:
            true = iou(mask_crop, reference)
            if cfg.predicted_iou_noise > 0:
                true += rng.normal(0.0, cfg.predicted_iou_noise)
            return min(1.0, max(0.0, true))

        def pack(mask_full: BitMask) -> ScoredMask:
            clipped = self._clip(view, mask_full)
            return ScoredMask(
                mask=clipped,
                predicted_iou=score(clipped),
                stability=1.0 if clipped.area else 0.0,
                provenance=provenance,
            )

        results = [pack(working)]
        if prompt.multimask:
            results.append(pack(merged))
            results.append(pack(_half_plane_cut(base, base, theta)))
        return results

    @staticmethod
    def _largest_neighbor(reg: _Registered, grain: int) -> int:
        ids = reg.neighbors[grain]
        if not ids:
            return 0
        return max(ids, key=lambda g: (reg.grain_areas[g - 1], -g))


def _half_plane_cut(working: BitMask, base: BitMask, theta: float) -> BitMask:
    """Erase the half-plane n.(p - centroid) < 0 through the base grain centroid."""
    if working.area == 0:
        return working
    bys, bxs = np.nonzero(base.to_array())
    cx, cy = float(bxs.mean()), float(bys.mean())
    arr = working.to_array()
    ys, xs = np.nonzero(arr)
    keep = (xs - cx) * math.cos(theta) + (ys - cy) * math.sin(theta) >= 0.0
    out = np.zeros_like(arr)
    out[ys[keep], xs[keep]] = True
    return BitMask.from_array(out)
