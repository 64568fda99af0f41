"""CSV and SVG renderings of per-cell scores.

Heatmaps put the most target-selective strip on the top row and the highest
magnitude band in the rightmost column. Colours are scaled to the min/max of
the class the grid belongs to; cross-class layer averages use their own range.
"""
from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

log = logging.getLogger(__name__)

METRICS = {"probe": "probe_accuracy", "deficit": "mean_rank_deficit"}
CSV_COLUMNS = ("class", "layer", "strip", "band", "metric", "value")

# viridis stops
_STOPS = [
    (0.0, (68, 1, 84)),
    (0.25, (59, 82, 139)),
    (0.5, (33, 145, 140)),
    (0.75, (94, 201, 98)),
    (1.0, (253, 231, 37)),
]
NULL_FILL = "#d9d9d9"
CELL = 48
MARGIN = 64


def color(t) -> str:
    t = min(max(float(t), 0.0), 1.0)
    for (t0, c0), (t1, c1) in zip(_STOPS, _STOPS[1:]):
        if t <= t1:
            f = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
            rgb = [round(a + f * (b - a)) for a, b in zip(c0, c1)]
            return "#%02x%02x%02x" % tuple(rgb)
    return "#%02x%02x%02x" % _STOPS[-1][1]


def _fmt(v):
    return "" if v is None else repr(float(v))


def _val(r, metric):
    v = getattr(r, METRICS[metric])
    return None if v is None else float(v)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def csv_rows(results, metrics=("probe", "deficit")):
    rows = []
    for metric in metrics:
        for r in results:
            rows.append((r.target_class, r.layer, r.strip, r.band, metric, _val(r, metric)))
    return rows


def write_csv(results, path, metrics=("probe", "deficit")) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for c, layer, s, b, metric, v in csv_rows(results, metrics):
        w.writerow([c, layer, s, b, metric, _fmt(v)])
    path = Path(path)
    path.write_text(buf.getvalue())
    return path


def read_csv(path):
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            v = row["value"]
            out.append((int(row["class"]), row["layer"], int(row["strip"]), int(row["band"]),
                        row["metric"], None if v == "" else float(v)))
    return out


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------

def grid_values(results, strips, bands, metric):
    """``[strips, bands]`` array for one grid; missing cells are NaN."""
    g = np.full((strips, bands), np.nan)
    for r in results:
        v = _val(r, metric)
        if v is not None:
            g[r.strip, r.band] = v
    return g


def render_svg(grid, title, vmin, vmax, label="") -> str:
    strips, bands = grid.shape
    width = 2 * MARGIN + bands * CELL + 40
    height = 2 * MARGIN + strips * CELL + 30
    degenerate = not np.isfinite(vmin) or not np.isfinite(vmax) or vmax <= vmin
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        f'<text x="{MARGIN}" y="20" font-size="13" font-weight="bold">{escape(title)}</text>',
    ]
    for s in range(strips):
        row = strips - 1 - s
        for b in range(bands):
            x, y = MARGIN + b * CELL, MARGIN + row * CELL
            v = grid[s, b]
            if np.isnan(v):
                fill, text = NULL_FILL, "null"
            else:
                fill = color(0.5 if degenerate else (v - vmin) / (vmax - vmin))
                text = f"{v:.3g}"
            parts.append(
                f'<rect class="cell" data-strip="{s}" data-band="{b}" x="{x}" y="{y}" width="{CELL}" '
                f'height="{CELL}" fill="{fill}" stroke="#ffffff" stroke-width="1"/>'
            )
            parts.append(
                f'<text x="{x + CELL / 2}" y="{y + CELL / 2 + 4}" text-anchor="middle" fill="#000000" '
                f'stroke="#ffffff" stroke-width="0.3">{text}</text>'
            )
    gx = MARGIN + bands * CELL
    gy = MARGIN + strips * CELL
    parts.append(f'<text x="{MARGIN}" y="{gy + 18}">magnitude (band 0 → {bands - 1})</text>')
    parts.append(
        f'<text x="{MARGIN - 10}" y="{gy}" transform="rotate(-90 {MARGIN - 10} {gy})">'
        f'selectivity (strip 0 → {strips - 1})</text>'
    )
    # legend: vertical colour bar with the class range
    lx = gx + 14
    n = 20
    step = strips * CELL / n
    for i in range(n):
        t = 0.5 if degenerate else 1 - i / (n - 1)
        parts.append(f'<rect class="legend" x="{lx}" y="{MARGIN + i * step:.2f}" width="12" '
                     f'height="{step + 0.5:.2f}" fill="{color(t)}"/>')
    if degenerate:
        rng = "n/a" if not np.isfinite(vmin) else f"{vmin:.3g}"
        parts.append(f'<text x="{lx}" y="{MARGIN - 6}">range {rng} (degenerate)</text>')
    else:
        parts.append(f'<text x="{lx}" y="{MARGIN - 6}">{vmax:.3g}</text>')
        parts.append(f'<text x="{lx}" y="{gy + 12}">{vmin:.3g}</text>')
    if label:
        parts.append(f'<text x="{MARGIN}" y="{height - 8}">{escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _range(values):
    vals = np.array([v for v in values if v is not None and np.isfinite(v)])
    if not vals.size:
        return np.nan, np.nan
    return float(vals.min()), float(vals.max())


def _nanmean(stack, shape):
    """Cell-wise mean that ignores nulls; a cell null everywhere stays null."""
    if not stack:
        return np.full(shape, np.nan)
    a = np.array(stack)
    n = np.sum(~np.isnan(a), axis=0)
    total = np.nansum(a, axis=0)
    return np.where(n > 0, total / np.maximum(n, 1), np.nan)


def emit_grid_report(results, metric, out, strips=4, bands=4, class_names=None):
    """Write one heatmap per (class, layer) grid plus class and layer averages.

    Returns ``(written paths, warnings)``.
    """
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {sorted(METRICS)}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    by_grid = defaultdict(list)
    for r in results:
        by_grid[(r.target_class, r.layer)].append(r)
    classes = sorted({c for c, _ in by_grid})
    layers = []
    for _, l in by_grid:
        if l not in layers:
            layers.append(l)
    name = (lambda c: class_names[c]) if class_names else str
    warnings = []
    written = []
    class_range = {c: _range(_val(r, metric) for r in results if r.target_class == c) for c in classes}
    grids = {}
    for (c, layer), rs in by_grid.items():
        g = grid_values(rs, strips, bands, metric)
        grids[(c, layer)] = g
        missing = int(np.isnan(g).sum())
        if missing:
            msg = f"{metric} grid class {c} layer {layer}: {missing} null cell(s)"
            warnings.append(msg)
            log.warning(msg)
        p = out / f"{metric}_class{c}_{layer}.svg"
        p.write_text(render_svg(g, f"{metric}: {name(c)} / {layer}", *class_range[c]))
        written.append(p)
    # marginals: class averaged over layers, layer averaged over classes
    for c in classes:
        stack = [grids[(c, l)] for l in layers if (c, l) in grids]
        g = _nanmean(stack, (strips, bands))
        p = out / f"{metric}_class{c}_mean.svg"
        p.write_text(render_svg(g, f"{metric}: {name(c)} / mean over layers", *class_range[c]))
        written.append(p)
    for l in layers:
        stack = [grids[(c, l)] for c in classes if (c, l) in grids]
        g = _nanmean(stack, (strips, bands))
        p = out / f"{metric}_mean_{l}.svg"
        p.write_text(render_svg(g, f"{metric}: mean over classes / {l}", *_range(g.ravel().tolist())))
        written.append(p)
    return written, warnings
