"""Hand-written SVG line charts for the per-epoch metrics CSV."""
from __future__ import annotations

import csv
import io
import math
from pathlib import Path

from .train import METRIC_COLUMNS

PANELS = [
    ("Loss", ["loss", "loss_ce", "loss_contrastive"]),
    ("mIoU", ["train_miou", "val_miou"]),
]
COLORS = ["#1f77b4", "#d62728", "#2ca02c"]
PANEL_W, PANEL_H = 360, 240
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 50, 20, 30, 40


class PlotError(ValueError):
    pass


def parse_metrics(text: str) -> list[dict]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise PlotError("metrics CSV has no header")
    header = rows[0]
    missing = [c for c in METRIC_COLUMNS if c not in header]
    if missing:
        raise PlotError(f"metrics CSV lacks columns {missing}")
    out = []
    for lineno, raw in enumerate(rows[1:], start=2):
        if not raw:
            continue
        if len(raw) != len(header):
            raise PlotError(f"line {lineno}: expected {len(header)} fields, got {len(raw)}")
        rec = {}
        for name, cell in zip(header, raw):
            try:
                rec[name] = float(cell) if cell.strip() else None
            except ValueError:
                raise PlotError(f"line {lineno}: bad number {cell!r} in column {name!r}") from None
        if rec["epoch"] is None:
            raise PlotError(f"line {lineno}: missing epoch")
        out.append(rec)
    return out


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _series_segments(rows, col):
    """Consecutive runs of present values; blank cells break the line."""
    segs, cur = [], []
    for r in rows:
        if r[col] is None or not math.isfinite(r[col]):
            if cur:
                segs.append(cur)
            cur = []
        else:
            cur.append((r["epoch"], r[col]))
    if cur:
        segs.append(cur)
    return segs


def _panel(rows, title, cols, x0) -> list[str]:
    pw = PANEL_W - MARGIN_L - MARGIN_R
    ph = PANEL_H - MARGIN_T - MARGIN_B
    left, top = x0 + MARGIN_L, MARGIN_T
    xs = [r["epoch"] for r in rows]
    ys = [r[c] for r in rows for c in cols if r[c] is not None and math.isfinite(r[c])]
    xlo, xhi = (min(xs), max(xs)) if xs else (0.0, 1.0)
    ylo, yhi = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if xhi == xlo:
        xhi = xlo + 1.0
    if yhi == ylo:
        yhi = ylo + 1.0
    sx = lambda x: left + (x - xlo) / (xhi - xlo) * pw  # noqa: E731
    sy = lambda y: top + ph - (y - ylo) / (yhi - ylo) * ph  # noqa: E731

    el = [f'<text x="{left + pw / 2:.2f}" y="{top - 10:.2f}" text-anchor="middle">{title}</text>',
          f'<line x1="{left:.2f}" y1="{top + ph:.2f}" x2="{left + pw:.2f}" y2="{top + ph:.2f}" stroke="black"/>',
          f'<line x1="{left:.2f}" y1="{top:.2f}" x2="{left:.2f}" y2="{top + ph:.2f}" stroke="black"/>']
    for t in _ticks(xlo, xhi):
        el.append(f'<text x="{sx(t):.2f}" y="{top + ph + 15:.2f}" text-anchor="middle">{t:.4g}</text>')
    for t in _ticks(ylo, yhi):
        el.append(f'<text x="{left - 5:.2f}" y="{sy(t) + 4:.2f}" text-anchor="end">{t:.4g}</text>')
    el.append(f'<text x="{left + pw / 2:.2f}" y="{top + ph + 32:.2f}" text-anchor="middle">epoch</text>')
    for i, col in enumerate(cols):
        color = COLORS[i % len(COLORS)]
        for seg in _series_segments(rows, col):
            pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in seg)
            el.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 12 + 14 * i
        el.append(f'<line x1="{left + pw - 110:.2f}" y1="{ly - 4:.2f}" x2="{left + pw - 95:.2f}" '
                  f'y2="{ly - 4:.2f}" stroke="{color}" stroke-width="1.5"/>')
        el.append(f'<text x="{left + pw - 90:.2f}" y="{ly:.2f}">{col}</text>')
    return el


def render_svg(rows: list[dict]) -> str:
    width, height = PANEL_W * len(PANELS), PANEL_H
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>']
    for k, (title, cols) in enumerate(PANELS):
        parts += _panel(rows, title, cols, k * PANEL_W)
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def plot(csv_path, out_path) -> str:
    try:
        text = Path(csv_path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise PlotError(f"metrics CSV not found: {csv_path}") from None
    svg = render_svg(parse_metrics(text))
    Path(out_path).write_text(svg, encoding="utf-8")
    return svg
