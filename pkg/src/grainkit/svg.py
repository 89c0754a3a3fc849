"""Hand-emitted SVG step plots for density histograms.

Plots carry their numeric content in an embedded ``<!--data ... -->``
comment so diffs and digests can target the data instead of the drawing.
"""

from __future__ import annotations

from .errors import DataMismatchError
from .evaluation import PropertyHistogram, histogram_to_csv

WIDTH = 640
HEIGHT = 400
MARGIN_LEFT = 64
MARGIN_RIGHT = 20
MARGIN_TOP = 42
MARGIN_BOTTOM = 52
N_TICKS = 5
COLOR_GT = "#e6873c"
COLOR_PRED = "#3c78e6"
COLOR_AXIS = "#444444"


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    return f"{v:.4g}"


def _step_path(edges, densities, to_x, to_y) -> str:
    parts = [f"M {_fmt(to_x(edges[0]))} {_fmt(to_y(densities[0]))}"]
    for i, d in enumerate(densities):
        parts.append(f"H {_fmt(to_x(edges[i + 1]))}")
        if i + 1 < len(densities):
            parts.append(f"V {_fmt(to_y(densities[i + 1]))}")
    return " ".join(parts)


def histogram_svg(
    gt: PropertyHistogram, pred: PropertyHistogram, title: str | None = None
) -> str:
    """Two density step plots over shared bins, ground truth vs predicted."""
    if gt.bin_edges != pred.bin_edges:
        raise DataMismatchError("histograms must share bin edges")
    edges = gt.bin_edges
    x_lo, x_hi = edges[0], edges[-1]
    y_hi = max(max(gt.densities), max(pred.densities), 0.0)
    if y_hi == 0.0:
        y_hi = 1.0
    y_hi *= 1.05
    plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    def to_x(v: float) -> float:
        return MARGIN_LEFT + (v - x_lo) / (x_hi - x_lo) * plot_w

    def to_y(v: float) -> float:
        return MARGIN_TOP + plot_h - v / y_hi * plot_h

    title = title or f"{gt.property} density"
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        "<!--data",
        histogram_to_csv(gt, pred),
        "-->",
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="24" text-anchor="middle" font-size="15">'
        f"{title}</text>",
    ]
    axis_y = MARGIN_TOP + plot_h
    lines.append(
        f'<line x1="{MARGIN_LEFT}" y1="{axis_y}" x2="{WIDTH - MARGIN_RIGHT}" '
        f'y2="{axis_y}" stroke="{COLOR_AXIS}"/>'
    )
    lines.append(
        f'<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" '
        f'y2="{axis_y}" stroke="{COLOR_AXIS}"/>'
    )
    for k in range(N_TICKS + 1):
        xv = x_lo + (x_hi - x_lo) * k / N_TICKS
        xp = _fmt(to_x(xv))
        lines.append(
            f'<line x1="{xp}" y1="{axis_y}" x2="{xp}" y2="{axis_y + 5}" '
            f'stroke="{COLOR_AXIS}"/>'
        )
        lines.append(
            f'<text x="{xp}" y="{axis_y + 20}" text-anchor="middle">'
            f"{_tick_label(xv)}</text>"
        )
        yv = y_hi * k / N_TICKS
        yp = _fmt(to_y(yv))
        lines.append(
            f'<line x1="{MARGIN_LEFT - 5}" y1="{yp}" x2="{MARGIN_LEFT}" y2="{yp}" '
            f'stroke="{COLOR_AXIS}"/>'
        )
        lines.append(
            f'<text x="{MARGIN_LEFT - 9}" y="{yp}" text-anchor="end" '
            f'dominant-baseline="middle">{_tick_label(yv)}</text>'
        )
    lines.append(
        f'<text x="{MARGIN_LEFT + plot_w / 2:.0f}" y="{HEIGHT - 12}" '
        f'text-anchor="middle">{gt.property}</text>'
    )
    lines.append(
        f'<text x="18" y="{MARGIN_TOP + plot_h / 2:.0f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {MARGIN_TOP + plot_h / 2:.0f})">density</text>'
    )
    if gt.n_samples:
        lines.append(
            f'<path d="{_step_path(edges, gt.densities, to_x, to_y)}" '
            f'fill="none" stroke="{COLOR_GT}" stroke-width="2"/>'
        )
    if pred.n_samples:
        lines.append(
            f'<path d="{_step_path(edges, pred.densities, to_x, to_y)}" '
            f'fill="none" stroke="{COLOR_PRED}" stroke-width="2"/>'
        )
    legend_x = WIDTH - MARGIN_RIGHT - 150
    lines.append(
        f'<line x1="{legend_x}" y1="{MARGIN_TOP + 8}" x2="{legend_x + 24}" '
        f'y2="{MARGIN_TOP + 8}" stroke="{COLOR_GT}" stroke-width="2"/>'
    )
    lines.append(
        f'<text x="{legend_x + 30}" y="{MARGIN_TOP + 12}">ground truth '
        f"(n={gt.n_samples})</text>"
    )
    lines.append(
        f'<line x1="{legend_x}" y1="{MARGIN_TOP + 26}" x2="{legend_x + 24}" '
        f'y2="{MARGIN_TOP + 26}" stroke="{COLOR_PRED}" stroke-width="2"/>'
    )
    lines.append(
        f'<text x="{legend_x + 30}" y="{MARGIN_TOP + 30}">predicted '
        f"(n={pred.n_samples})</text>"
    )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"
