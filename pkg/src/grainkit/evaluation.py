"""Ground-truth matching, failure triage, property statistics, and paired
bootstrap method comparison."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import ceil

import numpy as np

from .backends.base import FOREGROUND, Backend, Prompt
from .errors import DataMismatchError, DimensionMismatchError, InvalidConfigError
from .geometry import BitMask, GrainProps, ImageGray, LabelMap, iou, labelmap_to_masks
from .pipeline import SCORER_PREDICTED_IOU, SegmentationResult, mask_nms
from .rng import keyed_rng
from .valley import BoundaryMask, edge_alignment

CATEGORY_CAPTURED = "Captured"
CATEGORY_FILTERED_OUT = "FilteredOut"
CATEGORY_PROMPT_PLACEMENT = "PromptPlacement"
CATEGORY_PROMPT_TYPE = "PromptType"
CATEGORY_UNRECOVERABLE = "Unrecoverable"
CATEGORIES = (
    CATEGORY_CAPTURED,
    CATEGORY_FILTERED_OUT,
    CATEGORY_PROMPT_PLACEMENT,
    CATEGORY_PROMPT_TYPE,
    CATEGORY_UNRECOVERABLE,
)

TRIAGE_CSV_HEADER = (
    "grain_id,threshold,category,"
    "best_final_iou,best_prefilter_iou,best_points_iou,best_box_iou"
)
HISTOGRAM_CSV_HEADER = "bin_left,bin_right,density_gt,density_pred"


@dataclass(frozen=True)
class MatchResult:
    """One-to-one grain-to-mask assignment with per-grain IoU."""

    per_grain_iou: dict[int, float]
    assignment: dict[int, int | None]

    def iou_vector(self) -> list[float]:
        """Per-grain IoUs ordered by ascending grain id."""
        return [self.per_grain_iou[g] for g in sorted(self.per_grain_iou)]


def match(gt: LabelMap, preds: list[BitMask]) -> MatchResult:
    """Greedy one-to-one matching by descending IoU.

    Ties break toward the lower grain id, then the lower mask index.
    Unmatched grains score 0.
    """
    for m in preds:
        if (m.width, m.height) != (gt.width, gt.height):
            raise DimensionMismatchError(
                f"mask grid {m.width}x{m.height} vs labels {gt.width}x{gt.height}"
            )
    grains = labelmap_to_masks(gt)
    pairs = []
    for grain_id, grain in grains:
        gx0, gy0, gx1, gy1 = grain.bbox
        for idx, pred in enumerate(preds):
            px0, py0, px1, py1 = pred.bbox
            if px0 >= gx1 or gx0 >= px1 or py0 >= gy1 or gy0 >= py1:
                continue
            score = iou(grain, pred)
            if score > 0.0:
                pairs.append((score, grain_id, idx))
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
    per_grain_iou = {grain_id: 0.0 for grain_id, _ in grains}
    assignment: dict[int, int | None] = {grain_id: None for grain_id, _ in grains}
    taken: set[int] = set()
    unmatched = set(per_grain_iou)
    for score, grain_id, idx in pairs:
        if grain_id in unmatched and idx not in taken:
            per_grain_iou[grain_id] = score
            assignment[grain_id] = idx
            unmatched.discard(grain_id)
            taken.add(idx)
    return MatchResult(per_grain_iou=per_grain_iou, assignment=assignment)


def miou(m: MatchResult) -> float:
    """Arithmetic mean of per-grain IoU over every ground-truth grain."""
    if not m.per_grain_iou:
        raise DataMismatchError("mIoU needs at least one ground-truth grain")
    return float(sum(m.per_grain_iou.values()) / len(m.per_grain_iou))


@dataclass(frozen=True)
class TriageBest:
    """Best per-grain IoU along each of the four recovery routes."""

    final: float
    prefilter: float
    points: float
    box: float


@dataclass(frozen=True)
class TriageReport:
    """Per-grain failure categories across IoU thresholds."""

    thresholds: list[float]
    per_grain_category: dict[tuple[int, float], str]
    category_percentages: dict[float, dict[str, float]]
    per_grain_best: dict[int, TriageBest]

    def recoverable_fractions(self) -> dict[float, float]:
        """Fraction of grains that better prompting could still recover."""
        out = {}
        for t in self.thresholds:
            pct = self.category_percentages[t]
            out[t] = (
                pct[CATEGORY_FILTERED_OUT]
                + pct[CATEGORY_PROMPT_PLACEMENT]
                + pct[CATEGORY_PROMPT_TYPE]
            )
        return out


def _categorize(best: TriageBest, threshold: float) -> str:
    if best.final >= threshold:
        return CATEGORY_CAPTURED
    if best.prefilter >= threshold:
        return CATEGORY_FILTERED_OUT
    if best.points >= threshold:
        return CATEGORY_PROMPT_PLACEMENT
    if best.box >= threshold:
        return CATEGORY_PROMPT_TYPE
    return CATEGORY_UNRECOVERABLE


def sample_grain_points(
    grain: BitMask, n_points: int, rng: np.random.Generator
) -> list[tuple[int, int]]:
    """Uniform draws (with replacement) over a grain's foreground pixels."""
    ys, xs = np.nonzero(grain._patch)
    picks = rng.integers(0, len(xs), size=n_points)
    return [(int(xs[k]) + grain._ox, int(ys[k]) + grain._oy) for k in picks]


def _best_iou(grain: BitMask, masks) -> float:
    return max((iou(grain, m) for m in masks), default=0.0)


def triage(
    gt: LabelMap,
    result: SegmentationResult,
    backend: Backend,
    thresholds: list[float],
    n_random_points: int = 50,
    seed: int = 0,
    image: ImageGray | None = None,
    image_id: str = "image",
    workers: int = 1,
) -> TriageReport:
    """Classify every grain at every threshold by the first recovery route
    that reaches it: final masks, prefilter masks, random in-grain points,
    then a ground-truth box prompt."""
    thresholds = [float(t) for t in thresholds]
    if not thresholds or any(not 0.0 < t < 1.0 for t in thresholds):
        raise InvalidConfigError(f"thresholds must lie in (0, 1), got {thresholds}")
    if sorted(thresholds) != thresholds:
        raise InvalidConfigError("thresholds must be ascending")
    if n_random_points < 1:
        raise InvalidConfigError("n_random_points must be >= 1")
    if image is None:
        image = ImageGray(np.full((gt.height, gt.width), 0.5))
    handle = backend.open(image_id, image, None)
    final = [m.mask for m in result.masks]
    prefilter = [m.mask for m in result.prefilter_masks]

    def probe(item: tuple[int, BitMask]) -> tuple[int, TriageBest]:
        grain_id, grain = item
        rng = keyed_rng(seed, "triage", grain_id)
        candidates = []
        for x, y in sample_grain_points(grain, n_random_points, rng):
            prompt = Prompt(points=((x, y, FOREGROUND),), multimask=True)
            candidates.extend(m.mask for m in backend.predict(handle, prompt))
        box_prompt = Prompt(box=grain.bbox, multimask=True)
        box_masks = [m.mask for m in backend.predict(handle, box_prompt)]
        return grain_id, TriageBest(
            final=_best_iou(grain, final),
            prefilter=_best_iou(grain, prefilter),
            points=_best_iou(grain, candidates),
            box=_best_iou(grain, box_masks),
        )

    grains = labelmap_to_masks(gt)
    if workers <= 1:
        probed = [probe(item) for item in grains]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            probed = list(pool.map(probe, grains))
    per_grain_best = dict(sorted(probed))
    per_grain_category = {}
    category_percentages = {}
    n = len(grains)
    for t in thresholds:
        counts = {c: 0 for c in CATEGORIES}
        for grain_id, best in per_grain_best.items():
            category = _categorize(best, t)
            per_grain_category[(grain_id, t)] = category
            counts[category] += 1
        category_percentages[t] = {c: counts[c] / n for c in CATEGORIES}
    return TriageReport(
        thresholds=thresholds,
        per_grain_category=per_grain_category,
        category_percentages=category_percentages,
        per_grain_best=per_grain_best,
    )


def triage_to_csv(report: TriageReport) -> str:
    """Render a triage report as CSV, grains ascending then thresholds."""
    lines = [TRIAGE_CSV_HEADER]
    for grain_id in sorted(report.per_grain_best):
        best = report.per_grain_best[grain_id]
        for t in report.thresholds:
            category = report.per_grain_category[(grain_id, t)]
            lines.append(
                f"{grain_id},{t!r},{category},"
                f"{best.final!r},{best.prefilter!r},{best.points!r},{best.box!r}"
            )
    return "\n".join(lines) + "\n"


def per_grain_expected_iou(
    gt: LabelMap,
    backend: Backend,
    scorer: str = SCORER_PREDICTED_IOU,
    n_points: int = 50,
    seed: int = 0,
    image: ImageGray | None = None,
    image_id: str = "image",
    boundary: BoundaryMask | None = None,
    nms_iou_thresh: float = 0.2,
    workers: int = 1,
) -> dict[int, float]:
    """Expected IoU per grain: pool one mask per random in-grain prompt,
    NMS-reduce with the given scorer, score the top survivor."""
    if n_points < 1:
        raise InvalidConfigError("n_points must be >= 1")
    if image is None:
        image = ImageGray(np.full((gt.height, gt.width), 0.5))
    handle = backend.open(image_id, image, None)

    def probe(item: tuple[int, BitMask]) -> tuple[int, float]:
        grain_id, grain = item
        rng = keyed_rng(seed, "expected-iou", grain_id)
        pool = []
        for x, y in sample_grain_points(grain, n_points, rng):
            prompt = Prompt(points=((x, y, FOREGROUND),), multimask=False)
            pool.extend(backend.predict(handle, prompt))
        kept = mask_nms(pool, nms_iou_thresh, scorer=scorer, boundary=boundary)
        if not kept:
            return grain_id, 0.0
        if scorer == SCORER_PREDICTED_IOU:
            top = max(kept, key=lambda m: (m.predicted_iou, m.mask.area))
        else:
            top = max(kept, key=lambda m: (edge_alignment(m.mask, boundary), m.mask.area))
        return grain_id, iou(top.mask, grain)

    grains = labelmap_to_masks(gt)
    if workers <= 1:
        probed = [probe(item) for item in grains]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool_:
            probed = list(pool_.map(probe, grains))
    return dict(sorted(probed))


@dataclass(frozen=True)
class PropertyHistogram:
    """Density histogram of one grain property."""

    property: str
    bin_edges: list[float]
    densities: list[float]
    n_samples: int


PROPERTY_NAMES = ("area", "perimeter", "elongatedness")


def property_histograms(
    props: list[GrainProps], property: str, bin_edges: list[float]
) -> PropertyHistogram:
    """Density histogram with out-of-range values clipped into the end bins."""
    if property not in PROPERTY_NAMES:
        raise InvalidConfigError(f"property must be one of {PROPERTY_NAMES}")
    edges = [float(e) for e in bin_edges]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise InvalidConfigError("bin_edges must be strictly ascending with >= 2 edges")
    widths = np.diff(edges)
    if not props:
        return PropertyHistogram(property, edges, [0.0] * len(widths), 0)
    values = np.clip([getattr(p, property) for p in props], edges[0], edges[-1])
    counts, _ = np.histogram(values, bins=edges)
    densities = counts / (len(props) * widths)
    return PropertyHistogram(property, edges, [float(d) for d in densities], len(props))


def histogram_to_csv(gt: PropertyHistogram, pred: PropertyHistogram) -> str:
    """Side-by-side GT and predicted densities over shared bins."""
    if gt.bin_edges != pred.bin_edges:
        raise DataMismatchError("histograms must share bin edges")
    lines = [HISTOGRAM_CSV_HEADER]
    for i in range(len(gt.densities)):
        lines.append(
            f"{gt.bin_edges[i]!r},{gt.bin_edges[i + 1]!r},"
            f"{gt.densities[i]!r},{pred.densities[i]!r}"
        )
    return "\n".join(lines) + "\n"


def ks_statistic(a: list[float], b: list[float]) -> float:
    """Sup-norm distance between the two empirical CDFs."""
    if not len(a) or not len(b):
        raise DataMismatchError("ks_statistic needs two nonempty samples")
    sa = np.sort(np.asarray(a, dtype=np.float64))
    sb = np.sort(np.asarray(b, dtype=np.float64))
    grid = np.union1d(sa, sb)
    fa = np.searchsorted(sa, grid, side="right") / len(sa)
    fb = np.searchsorted(sb, grid, side="right") / len(sb)
    return float(np.abs(fa - fb).max())


@dataclass(frozen=True)
class BootstrapComparison:
    """Paired percentile-bootstrap comparison of two matched samples."""

    mean_a: float
    mean_b: float
    diff: float
    ci_low: float
    ci_high: float
    n_resamples: int
    seed: int


def _nearest_rank(sorted_values: np.ndarray, q: float) -> float:
    rank = max(1, ceil(q * len(sorted_values)))
    return float(sorted_values[rank - 1])


def paired_bootstrap_ci(
    a: list[float],
    b: list[float],
    n_resamples: int = 10000,
    alpha: float = 0.05,
    seed: int = 0,
) -> BootstrapComparison:
    """Percentile CI of mean(b) - mean(a) under paired index resampling."""
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape or va.ndim != 1:
        raise DataMismatchError(f"paired samples must match, got {va.shape} vs {vb.shape}")
    n = len(va)
    if n < 2:
        raise DataMismatchError("paired bootstrap needs at least 2 pairs")
    if n_resamples < 1:
        raise InvalidConfigError("n_resamples must be >= 1")
    if not 0.0 < alpha < 1.0:
        raise InvalidConfigError(f"alpha must lie in (0, 1), got {alpha}")
    delta = vb - va
    rng = keyed_rng(seed, "bootstrap")
    diffs = np.empty(n_resamples, dtype=np.float64)
    for r in range(n_resamples):
        idx = rng.integers(0, n, size=n)
        diffs[r] = delta[idx].mean()
    diffs.sort()
    return BootstrapComparison(
        mean_a=float(va.mean()),
        mean_b=float(vb.mean()),
        diff=float(delta.mean()),
        ci_low=_nearest_rank(diffs, alpha / 2),
        ci_high=_nearest_rank(diffs, 1 - alpha / 2),
        n_resamples=n_resamples,
        seed=seed,
    )


def comparison_report(
    method_a: str, method_b: str, miou_a: float, miou_b: float, comp: BootstrapComparison
) -> dict:
    """Comparison summary in the report-JSON shape."""
    return {
        "method_a": method_a,
        "method_b": method_b,
        "miou_a": miou_a,
        "miou_b": miou_b,
        "diff": comp.diff,
        "ci": [comp.ci_low, comp.ci_high],
        "n_resamples": comp.n_resamples,
        "seed": comp.seed,
    }
