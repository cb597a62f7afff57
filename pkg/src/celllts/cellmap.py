"""Cellmap rendering: a grid of standardized cellwise residuals as SVG.

Cells within the flagging cutoff stay neutral; positive residuals ramp from
white to red and negative ones from white to blue, saturating at |stdres| = 6.
Missing cells are gray with a cross glyph. SVG keeps the golden-file tests
textually diffable.
"""

from __future__ import annotations

import numpy as np

from .numeric_core import marginal_cutoff
from .pipeline import CellResiduals

_WARM = (178, 24, 43)    # too high
_COOL = (33, 102, 172)   # too low
_MISSING = "#bdbdbd"
_NEUTRAL = "#ffffff"

CELL = 22
FONT = 11


def cell_color(stdres: float, cutoff: float, saturate: float = 6.0) -> str:
    if not np.isfinite(stdres):
        return _MISSING
    a = abs(stdres)
    if a <= cutoff:
        return _NEUTRAL
    t = min((a - cutoff) / (saturate - cutoff), 1.0)
    full = _WARM if stdres > 0 else _COOL
    rgb = tuple(round(255 + (c - 255) * t) for c in full)
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _row_scores(res: CellResiduals, sort_by: str) -> np.ndarray:
    combined = np.column_stack([res.predictor_stdres, res.response_stdres])
    if sort_by == "abs-residual-sum":
        return np.nansum(np.abs(combined), axis=1)
    if sort_by == "flag-count":
        return (res.flags == 0).sum(axis=1).astype(float)
    raise ValueError("sort_by must be 'abs-residual-sum' or 'flag-count'")


def select_rows(res: CellResiduals, top_n: int | None, sort_by: str) -> np.ndarray:
    """Indices of the displayed rows, sorted by descending score (stable)."""
    scores = _row_scores(res, sort_by)
    order = np.argsort(-scores, kind="stable")
    if top_n is not None:
        order = order[: int(top_n)]
    return order


def render_cellmap(res: CellResiduals, row_labels=None, *,
                   top_n: int | None = None,
                   sort_by: str = "abs-residual-sum",
                   flag_cutoff: float | None = None,
                   saturate: float = 6.0,
                   title: str | None = None) -> str:
    """Render selected rows of a CellResiduals as an SVG document."""
    if flag_cutoff is None:
        flag_cutoff = marginal_cutoff()
    n, d = res.predictor_stdres.shape
    if row_labels is None:
        row_labels = [str(i) for i in range(n)]
    if len(row_labels) != n:
        raise ValueError("row_labels length mismatch")
    col_names = list(res.column_names) if res.column_names else [
        f"x{j + 1}" for j in range(d)]
    col_names.append(res.response_name or "y")

    rows = select_rows(res, top_n, sort_by)
    label_w = 10 + int(7.0 * max((len(str(row_labels[i])) for i in rows),
                                 default=1))
    header_h = 12 + int(6.5 * max(len(c) for c in col_names))
    width = label_w + CELL * (d + 1) + 10
    height = header_h + CELL * len(rows) + 10

    combined = np.column_stack([res.predictor_stdres, res.response_stdres])
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<g font-family="sans-serif" font-size="{FONT}">',
    ]
    if title:
        out.append(f'<title>{_escape(title)}</title>')
    for j, name in enumerate(col_names):
        cx = label_w + j * CELL + CELL // 2
        out.append(
            f'<text x="{cx}" y="{header_h - 6}" text-anchor="start" '
            f'transform="rotate(-60 {cx} {header_h - 6})">{_escape(name)}</text>'
        )
    for r, i in enumerate(rows):
        cy = header_h + r * CELL
        out.append(
            f'<text x="{label_w - 6}" y="{cy + CELL - 7}" '
            f'text-anchor="end">{_escape(str(row_labels[i]))}</text>'
        )
        for j in range(d + 1):
            x = label_w + j * CELL
            val = combined[i, j]
            color = cell_color(val, flag_cutoff, saturate)
            out.append(
                f'<rect x="{x}" y="{cy}" width="{CELL}" height="{CELL}" '
                f'fill="{color}" stroke="#777777" stroke-width="1"/>'
            )
            if not np.isfinite(val):
                x1, y1 = x + 6, cy + 6
                x2, y2 = x + CELL - 6, cy + CELL - 6
                out.append(
                    f'<path d="M{x1} {y1} L{x2} {y2} M{x1} {y2} L{x2} {y1}" '
                    f'stroke="#555555" stroke-width="1.5" fill="none"/>'
                )
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(text: str) -> str:
    return (text.replace("&", "&amp;").replace("<", "&lt;")
            .replace(">", "&gt;"))


def render_curves_svg(summary, metric: str = "md",
                      width: int = 480, height: int = 320) -> str:
    """Minimal log10 mean-metric vs gamma line plot, one polyline per
    estimator."""
    key = f"log10_mean_{metric}"
    estimators = sorted({row["estimator"] for row in summary})
    palette = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#8c564b"]
    pts = {est: sorted(
        (row["gamma"], row[key]) for row in summary if row["estimator"] == est
        and np.isfinite(row[key])
    ) for est in estimators}
    xs = [g for series in pts.values() for g, _ in series]
    ys = [v for series in pts.values() for _, v in series]
    if not xs:
        raise ValueError("nothing to plot")
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    xspan = (x1 - x0) or 1.0
    yspan = (y1 - y0) or 1.0
    pad = 40

    def sx(g):
        return pad + (g - x0) / xspan * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - y0) / yspan * (height - 2 * pad)

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<g font-family="sans-serif" font-size="{FONT}">',
        f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" '
        f'height="{height - 2 * pad}" fill="none" stroke="#333333"/>',
        f'<text x="{width // 2}" y="{height - 8}" text-anchor="middle">'
        f'gamma</text>',
        f'<text x="12" y="{height // 2}" text-anchor="middle" '
        f'transform="rotate(-90 12 {height // 2})">log10 mean {metric}</text>',
    ]
    for c, est in enumerate(estimators):
        series = pts[est]
        if not series:
            continue
        color = palette[c % len(palette)]
        path = " ".join(f"{sx(g):.1f},{sy(v):.1f}" for g, v in series)
        out.append(f'<polyline points="{path}" fill="none" '
                   f'stroke="{color}" stroke-width="1.5"/>')
        gx, gy = series[-1]
        out.append(f'<text x="{sx(gx) + 4:.1f}" y="{sy(gy):.1f}" '
                   f'fill="{color}">{_escape(est)}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
