"""Plain SVG output: line charts for traces and probe curves, top-down frame snapshots."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .geometry import box_corners

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    first = math.ceil(lo / step) * step
    return [first + i * step for i in range(int((hi - first) / step + 1e-9) + 1)]


def line_chart(series: dict, title: str = "", xlabel: str = "", ylabel: str = "",
               width: int = 640, height: int = 400) -> str:
    """``series`` maps a name to ``(xs, ys)``; one polyline per series."""
    left, right, top, bottom = 60, 150, 40, 50
    pw, ph = width - left - right, height - top - bottom
    xs_all = [x for xs, _ in series.values() for x in xs]
    ys_all = [y for _, ys in series.values() for y in ys if math.isfinite(y)]
    x0, x1 = (min(xs_all), max(xs_all)) if xs_all else (0.0, 1.0)
    y0, y1 = (min(ys_all), max(ys_all)) if ys_all else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{_fmt(px(t))}" y1="{top + ph}" x2="{_fmt(px(t))}" y2="{top + ph + 4}" stroke="#444"/>')
        out.append(f'<text x="{_fmt(px(t))}" y="{top + ph + 18}" text-anchor="middle">{t:g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{left - 4}" y1="{_fmt(py(t))}" x2="{left}" y2="{_fmt(py(t))}" stroke="#444"/>')
        out.append(f'<text x="{left - 6}" y="{_fmt(py(t) + 4)}" text-anchor="end">{t:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="15" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 15 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for n, (name, (xs, ys)) in enumerate(series.items()):
        colour = PALETTE[n % len(PALETTE)]
        pts = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(xs, ys) if math.isfinite(y))
        out.append(f'<polyline data-series="{escape(name)}" points="{pts}" fill="none" '
                   f'stroke="{colour}" stroke-width="2"/>')
        ly = top + 10 + 18 * n
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _read_csv(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return list(reader.fieldnames or []), list(reader)


TRACE_SERIES = ("nds", "nds_t", "pem_ll")
PROBE_SERIES = ("adversarial_fraction", "mean_nds", "mean_nds_t")


def chart_from_csv(path) -> str:
    """Chart a search trace or a robustness-probe CSV, picked by its header."""
    header, rows = _read_csv(path)
    if "rollout_index" in header:
        xs = [float(r["rollout_index"]) for r in rows]
        series = {c: (xs, [float(r[c]) for r in rows]) for c in TRACE_SERIES if c in header}
        return line_chart(series, "Best failing rollout so far", "rollout", "metric")
    if "strength" in header:
        xs = [float(r["strength"]) for r in rows]
        series = {c: (xs, [float(r[c]) for r in rows]) for c in PROBE_SERIES if c in header}
        return line_chart(series, "Perturbation of the adversarial error", "perturbation strength", "value")
    raise ValueError(f"{path}: not a trace or probe CSV")


def frame_svg(scenario, world, perceived, t: int, size: int = 600, span: float = 80.0) -> str:
    """Top-down view centred on the ego: map lanes, ego route, true boxes
    (solid) and perceived boxes (dashed)."""
    ego = world.ego[t]
    cx, cy = ego.position
    scale = size / span

    def tx(p):
        return (size / 2 + (p[0] - cx) * scale, size / 2 - (p[1] - cy) * scale)

    def poly(points, **attrs):
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in (tx(p) for p in points))
        extra = " ".join(f'{k.replace("_", "-")}="{v}"' for k, v in attrs.items())
        return f"<polygon points=\"{pts}\" {extra}/>"

    def line(points, **attrs):
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in (tx(p) for p in points))
        extra = " ".join(f'{k.replace("_", "-")}="{v}"' for k, v in attrs.items())
        return f"<polyline points=\"{pts}\" fill=\"none\" {extra}/>"

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}" font-family="sans-serif" font-size="12">',
        f'<rect width="{size}" height="{size}" fill="#f4f4f0"/>',
    ]
    for lane in scenario.map:
        out.append(line(lane.centreline, stroke="#bbbbbb", stroke_width=_fmt(3.5 * scale), stroke_opacity="0.5"))
    out.append(line(scenario.ego_route.polyline, stroke="#1f77b4", stroke_dasharray="4 4"))
    out.append(poly(box_corners(ego.position, ego.heading, *ego.extent), fill="#1f77b4", stroke="#0b3d66"))
    for j in range(world.d):
        corners = box_corners(world.positions[t, j], world.headings[t, j], *world.extents[j])
        out.append(poly(corners, fill="#999999", fill_opacity="0.6", stroke="#333"))
        if perceived.present[t, j]:
            pc = box_corners(perceived.positions[t, j], perceived.headings[t, j], *world.extents[j])
            out.append(poly(pc, fill="none", stroke="#d62728", stroke_dasharray="3 2", stroke_width="1.5"))
    out.append(f'<text x="10" y="20">{escape(scenario.scenario_id)}  t = {world.timestamps[t]:.1f} s  '
               f'v = {ego.speed:.1f} m/s</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_frames(scenario, world, perceived, directory, stride: int = 10) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in range(0, world.T, max(1, stride)):
        p = directory / f"frame_{t:04d}.svg"
        p.write_text(frame_svg(scenario, world, perceived, t))
        paths.append(p)
    return paths


def polyline_count(svg: str) -> int:
    return svg.count("<polyline data-series=")


def series_values(svg: str, name: str) -> np.ndarray:
    """Screen coordinates of one series, for structural checks."""
    key = f'data-series="{name}" points="'
    i = svg.index(key) + len(key)
    pts = svg[i:svg.index('"', i)].split()
    return np.array([[float(v) for v in p.split(",")] for p in pts])
