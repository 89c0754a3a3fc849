"""Full-image segmentation orchestration.

Two drivers over a promptable backend: `amg_generate` runs a dense grid
over overlapping crops with quality filtering and two NMS stages, and
`iterative_segment` starts from a coarse grid and keeps prompting the
centers of coverage holes until a point budget runs out.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from math import floor

import numpy as np

from .backends.base import Backend, Box, Prompt, ScoredMask
from .errors import BackendUnavailableError, InvalidConfigError
from .geometry import (
    BitMask,
    ImageGray,
    connected_components,
    distance_transform,
    fill_holes,
    iou,
    remove_small_components,
    stability_score,
)
from .valley import DEFAULT_SCALES, BoundaryMask, boundary_mask, edge_alignment, sato_response

PROMPT_SHADOW_RADIUS = 2.0  # px; issued prompts shadow this much of later holes

SCORER_PREDICTED_IOU = "predicted_iou"
SCORER_EDGE_ALIGNMENT = "edge_alignment"


@dataclass(frozen=True)
class PipelineConfig:
    grid_side: int = 18
    crop_layers: int = 0
    crop_overlap: float = 0.34
    pred_iou_thresh: float = 0.88
    stability_thresh: float = 0.95
    stability_delta: float = 1.0
    min_region_area: int = 25
    max_hole_area: int = 25
    box_nms_iou: float = 0.7
    mask_nms_iou: float = 0.2
    nms_scorer: str = SCORER_PREDICTED_IOU
    multimask: bool = True

    def __post_init__(self):
        if self.grid_side < 1:
            raise InvalidConfigError(f"grid_side must be >= 1, got {self.grid_side}")
        if self.crop_layers < 0:
            raise InvalidConfigError(f"crop_layers must be >= 0, got {self.crop_layers}")
        if not (0.0 <= self.crop_overlap < 1.0):
            raise InvalidConfigError(
                f"crop_overlap must be in [0,1), got {self.crop_overlap}"
            )
        for name in ("pred_iou_thresh", "stability_thresh", "box_nms_iou", "mask_nms_iou"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise InvalidConfigError(f"{name} must be in [0,1], got {v}")
        if self.stability_delta <= 0:
            raise InvalidConfigError(
                f"stability_delta must be > 0, got {self.stability_delta}"
            )
        if self.min_region_area < 0 or self.max_hole_area < 0:
            raise InvalidConfigError("area thresholds must be >= 0")
        if self.nms_scorer not in (SCORER_PREDICTED_IOU, SCORER_EDGE_ALIGNMENT):
            raise InvalidConfigError(f"unknown nms_scorer {self.nms_scorer!r}")


@dataclass(frozen=True)
class IterativeConfig:
    initial_grid_side: int = 10
    points_per_round: int = 50
    point_budget: int = 300
    min_hole_area: int = 30

    def __post_init__(self):
        if self.initial_grid_side < 1:
            raise InvalidConfigError(
                f"initial_grid_side must be >= 1, got {self.initial_grid_side}"
            )
        if self.points_per_round < 1:
            raise InvalidConfigError(
                f"points_per_round must be >= 1, got {self.points_per_round}"
            )
        if self.point_budget < self.initial_grid_side**2:
            raise InvalidConfigError(
                f"point_budget {self.point_budget} below the "
                f"{self.initial_grid_side}x{self.initial_grid_side} initial grid"
            )
        if self.min_hole_area < 1:
            raise InvalidConfigError(
                f"min_hole_area must be >= 1, got {self.min_hole_area}"
            )


@dataclass
class SegmentationResult:
    masks: list[ScoredMask]
    prefilter_masks: list[ScoredMask]
    prompts_used: list[tuple[int, int]]
    config_digest: str
    timing: dict[str, float] = field(default_factory=dict)
    partial: bool = False


def config_digest(cfg) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def grid_points(width: int, height: int, n: int) -> list[tuple[int, int]]:
    """n x n points at the centers of a uniform cell partition, row-major."""
    if n < 1:
        raise InvalidConfigError(f"grid side must be >= 1, got {n}")
    xs = [min(width - 1, floor((i + 0.5) * width / n + 0.5)) for i in range(n)]
    ys = [min(height - 1, floor((j + 0.5) * height / n + 0.5)) for j in range(n)]
    return [(x, y) for y in ys for x in xs]


@dataclass(frozen=True)
class Crop:
    box: Box
    layer: int


def generate_crops(width: int, height: int, layers: int, overlap: float) -> list[Crop]:
    """Layer 0 is the full frame; layer L tiles each dimension with 2^L
    overlap-expanded windows."""
    if layers < 0:
        raise InvalidConfigError(f"layers must be >= 0, got {layers}")
    if not (0.0 <= overlap < 1.0):
        raise InvalidConfigError(f"overlap must be in [0,1), got {overlap}")
    crops = [Crop(box=(0, 0, width, height), layer=0)]
    for layer in range(1, layers + 1):
        n = 2**layer
        side_w = min(width, round(width / n * (1.0 + overlap)))
        side_h = min(height, round(height / n * (1.0 + overlap)))
        for j in range(n):
            y0 = round(j * (height - side_h) / (n - 1)) if n > 1 else 0
            for i in range(n):
                x0 = round(i * (width - side_w) / (n - 1)) if n > 1 else 0
                crops.append(Crop(box=(x0, y0, x0 + side_w, y0 + side_h), layer=layer))
    return crops


def filter_masks(masks: list[ScoredMask], cfg: PipelineConfig) -> list[ScoredMask]:
    """Quality thresholds, then cleanup: drop small specks, fill small holes,
    keep the largest connected component."""
    out = []
    for m in masks:
        if m.predicted_iou < cfg.pred_iou_thresh:
            continue
        stability = m.stability
        if m.soft is not None:
            stability = stability_score(m.soft, m.soft.tau, cfg.stability_delta)
        if stability < cfg.stability_thresh:
            continue
        cleaned = remove_small_components(m.mask, cfg.min_region_area)
        cleaned = fill_holes(cleaned, cfg.max_hole_area)
        if cleaned.area == 0:
            continue
        parts = connected_components(cleaned, connectivity=4)
        if len(parts) > 1:
            cleaned = parts[0]
        if cleaned.area == 0:
            continue
        if cleaned == m.mask:
            out.append(m)
        else:
            out.append(
                ScoredMask(
                    mask=cleaned,
                    predicted_iou=m.predicted_iou,
                    stability=m.stability,
                    provenance=m.provenance,
                    soft=None,
                )
            )
    return out


def _nms_order(masks: list[ScoredMask], scores: list[float]) -> list[int]:
    return sorted(
        range(len(masks)), key=lambda i: (-scores[i], -masks[i].mask.area, i)
    )


def _box_iou(a: Box, b: Box) -> float:
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def box_nms(masks: list[ScoredMask], iou_thresh: float) -> list[ScoredMask]:
    """Greedy NMS on bounding boxes, ordered by predicted IoU."""
    kept: list[int] = []
    boxes = [m.mask.bbox for m in masks]
    for i in _nms_order(masks, [m.predicted_iou for m in masks]):
        if masks[i].mask.area == 0:
            continue
        if all(_box_iou(boxes[i], boxes[j]) <= iou_thresh for j in kept):
            kept.append(i)
    kept.sort()
    return [masks[i] for i in kept]


def mask_nms(
    masks: list[ScoredMask],
    iou_thresh: float,
    scorer: str = SCORER_PREDICTED_IOU,
    boundary: BoundaryMask | None = None,
) -> list[ScoredMask]:
    """Greedy NMS on pixel-level mask IoU; ordering taken from the scorer."""
    if scorer == SCORER_PREDICTED_IOU:
        scores = [m.predicted_iou for m in masks]
    elif scorer == SCORER_EDGE_ALIGNMENT:
        if boundary is None:
            raise InvalidConfigError("edge_alignment scoring needs a boundary mask")
        scores = [edge_alignment(m.mask, boundary) for m in masks]
    else:
        raise InvalidConfigError(f"unknown nms scorer {scorer!r}")
    kept: list[int] = []
    for i in _nms_order(masks, scores):
        if masks[i].mask.area == 0:
            continue
        if all(iou(masks[i].mask, masks[j].mask) <= iou_thresh for j in kept):
            kept.append(i)
    kept.sort()
    return [masks[i] for i in kept]


def coverage(masks: list[BitMask], width: int, height: int) -> BitMask:
    """Pixel-wise union."""
    canvas = np.zeros((height, width), dtype=bool)
    for m in masks:
        m.paint_into(canvas)
    return BitMask.from_array(canvas)


def hole_targets(cov: BitMask, min_hole_area: int, k: int) -> list[tuple[int, int]]:
    """Centers (distance-transform argmax) of the k largest uncovered regions."""
    if k < 1:
        raise InvalidConfigError(f"k must be >= 1, got {k}")
    complement = BitMask.from_array(~cov.to_array())
    targets = []
    for hole in connected_components(complement, connectivity=4):
        if hole.area < min_hole_area:
            break  # components arrive ordered by descending area
        dt = distance_transform(hole)
        idx = int(np.argmax(dt))  # row-major first on ties
        targets.append((idx % cov.width, idx // cov.width))
        if len(targets) == k:
            break
    return targets


def default_boundary(image: ImageGray) -> BoundaryMask:
    return boundary_mask(sato_response(image, DEFAULT_SCALES))


def _touches_crop_edge(bbox: Box, crop: Box, width: int, height: int) -> bool:
    """True when the bbox presses against a crop edge that is not also an
    image edge."""
    bx0, by0, bx1, by1 = bbox
    cx0, cy0, cx1, cy1 = crop
    return (
        (bx0 == cx0 and cx0 != 0)
        or (by0 == cy0 and cy0 != 0)
        or (bx1 == cx1 and cx1 != width)
        or (by1 == cy1 and cy1 != height)
    )


def _predict_batch(
    backend: Backend,
    jobs: list[tuple[str, Prompt]],
    workers: int,
) -> tuple[list[tuple[int, list[ScoredMask]]], BackendUnavailableError | None]:
    """Run predictions, collecting results in submission order.

    Returns (index, result) pairs for completed jobs; on backend failure
    whatever completed is returned together with the error.
    """
    results: list[tuple[int, list[ScoredMask]]] = []
    if workers <= 1:
        for i, (handle, prompt) in enumerate(jobs):
            try:
                results.append((i, backend.predict(handle, prompt)))
            except BackendUnavailableError as exc:
                return results, exc
        return results, None
    error: BackendUnavailableError | None = None
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(backend.predict, h, p) for h, p in jobs]
        for i, fut in enumerate(futures):
            try:
                results.append((i, fut.result()))
            except BackendUnavailableError as exc:
                error = error if error is not None else exc
    return results, error


def _to_full_frame(
    raw: list[ScoredMask], crop: Box, width: int, height: int
) -> list[ScoredMask]:
    x0, y0, x1, y1 = crop
    if (x0, y0, x1, y1) == (0, 0, width, height):
        return list(raw)
    out = []
    for m in raw:
        out.append(
            ScoredMask(
                mask=m.mask.translate(x0, y0, width, height),
                predicted_iou=m.predicted_iou,
                stability=m.stability,
                provenance=m.provenance,
                soft=None,  # logits are crop-frame; do not carry them across
            )
        )
    return out


def amg_generate(
    image: ImageGray,
    backend: Backend,
    cfg: PipelineConfig,
    image_id: str = "image",
    boundary: BoundaryMask | None = None,
    workers: int = 1,
) -> SegmentationResult:
    """Grid prompting over crops, quality filtering, per-crop box NMS, then
    global mask NMS."""
    t0 = time.perf_counter()
    width, height = image.width, image.height
    crops = generate_crops(width, height, cfg.crop_layers, cfg.crop_overlap)
    jobs: list[tuple[str, Prompt]] = []
    job_crop: list[int] = []
    all_prompts: list[tuple[int, int]] = []
    for ci, crop in enumerate(crops):
        x0, y0, x1, y1 = crop.box
        handle = backend.open(
            image_id, image, None if crop.box == (0, 0, width, height) else crop.box
        )
        for px, py in grid_points(x1 - x0, y1 - y0, cfg.grid_side):
            jobs.append((handle, Prompt(points=((px, py, 1),), multimask=cfg.multimask)))
            job_crop.append(ci)
            all_prompts.append((px + x0, py + y0))

    t1 = time.perf_counter()
    completed, error = _predict_batch(backend, jobs, workers)
    t2 = time.perf_counter()

    prefilter: list[ScoredMask] = []
    per_crop: list[list[ScoredMask]] = [[] for _ in crops]
    for idx, raw in completed:
        full = _to_full_frame(raw, crops[job_crop[idx]].box, width, height)
        prefilter.extend(full)
        per_crop[job_crop[idx]].extend(full)

    merged: list[ScoredMask] = []
    for ci in range(len(crops)):
        surviving = filter_masks(per_crop[ci], cfg)
        if crops[ci].layer > 0:
            # a mask cut off by an inner crop's edge is a sliver of some
            # grain the full-frame pass sees whole; drop it
            surviving = [
                m
                for m in surviving
                if not _touches_crop_edge(m.mask.bbox, crops[ci].box, width, height)
            ]
        merged.extend(box_nms(surviving, cfg.box_nms_iou))
    if cfg.nms_scorer == SCORER_EDGE_ALIGNMENT and boundary is None:
        boundary = default_boundary(image)
    final = mask_nms(merged, cfg.mask_nms_iou, cfg.nms_scorer, boundary)
    t3 = time.perf_counter()

    result = SegmentationResult(
        masks=final,
        prefilter_masks=prefilter,
        prompts_used=[all_prompts[i] for i, _ in completed] if error else all_prompts,
        config_digest=config_digest(cfg),
        timing={
            "setup": t1 - t0,
            "predict": t2 - t1,
            "reduce": t3 - t2,
            "total": t3 - t0,
        },
        partial=error is not None,
    )
    if error is not None:
        error.partial_result = result
        raise error
    return result


def _shadow_coverage(
    cov: BitMask, prompts: list[tuple[int, int]], radius: float
) -> BitMask:
    """Coverage augmented with small discs around every issued prompt, so a
    failing spot cannot be re-prompted forever."""
    canvas = cov.to_array()
    r = int(np.ceil(radius))
    for px, py in prompts:
        y0, y1 = max(0, py - r), min(cov.height, py + r + 1)
        x0, x1 = max(0, px - r), min(cov.width, px + r + 1)
        ys, xs = np.ogrid[y0:y1, x0:x1]
        canvas[y0:y1, x0:x1] |= (xs - px) ** 2 + (ys - py) ** 2 <= radius * radius
    return BitMask.from_array(canvas)


def iterative_segment(
    image: ImageGray,
    backend: Backend,
    cfg: PipelineConfig,
    it: IterativeConfig,
    image_id: str = "image",
    boundary: BoundaryMask | None = None,
    workers: int = 1,
) -> SegmentationResult:
    """Coarse grid, then rounds of hole-center prompts until the budget or
    the holes run out."""
    t0 = time.perf_counter()
    width, height = image.width, image.height
    handle = backend.open(image_id, image)
    if cfg.nms_scorer == SCORER_EDGE_ALIGNMENT and boundary is None:
        boundary = default_boundary(image)

    kept: list[ScoredMask] = []
    prefilter: list[ScoredMask] = []
    prompts_used: list[tuple[int, int]] = []
    points = grid_points(width, height, it.initial_grid_side)
    predict_time = 0.0
    while points:
        jobs = [
            (handle, Prompt(points=((x, y, 1),), multimask=cfg.multimask))
            for x, y in points
        ]
        tp = time.perf_counter()
        completed, error = _predict_batch(backend, jobs, workers)
        predict_time += time.perf_counter() - tp
        prompts_used.extend([points[i] for i, _ in completed] if error else points)
        fresh: list[ScoredMask] = []
        for _, raw in completed:
            prefilter.extend(raw)
            fresh.extend(raw)
        kept = mask_nms(
            kept + filter_masks(fresh, cfg), cfg.mask_nms_iou, cfg.nms_scorer, boundary
        )
        if error is not None:
            result = SegmentationResult(
                masks=kept,
                prefilter_masks=prefilter,
                prompts_used=prompts_used,
                config_digest=config_digest(cfg),
                timing={"predict": predict_time, "total": time.perf_counter() - t0},
                partial=True,
            )
            error.partial_result = result
            raise error
        room = it.point_budget - len(prompts_used)
        if room <= 0:
            break
        cov = coverage([m.mask for m in kept], width, height)
        shadowed = _shadow_coverage(cov, prompts_used, PROMPT_SHADOW_RADIUS)
        points = hole_targets(
            shadowed, it.min_hole_area, min(it.points_per_round, room)
        )
    return SegmentationResult(
        masks=kept,
        prefilter_masks=prefilter,
        prompts_used=prompts_used,
        config_digest=config_digest(cfg),
        timing={"predict": predict_time, "total": time.perf_counter() - t0},
    )
