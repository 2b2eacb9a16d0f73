"""Standalone SVG scatter overlays and heat maps, built with ElementTree."""

from __future__ import annotations

import xml.etree.ElementTree as ET

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _frame(width: int, height: int, title: str):
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(width), height=str(height),
                     viewBox=f"0 0 {width} {height}")
    ET.SubElement(svg, "rect", x="0", y="0", width=str(width), height=str(height), fill="white")
    t = ET.SubElement(svg, "text", x=str(width // 2), y="18", fill="black")
    t.set("text-anchor", "middle")
    t.set("font-size", "14")
    t.set("font-family", "sans-serif")
    t.text = title
    return svg


def _bounds(arrays, pad: float = 0.05):
    pts = np.concatenate([np.asarray(a, dtype=float) for a in arrays if len(a)])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    return lo - pad * span, hi + pad * span


def _write(svg, path) -> None:
    ET.ElementTree(svg).write(path, encoding="utf-8", xml_declaration=True)


def scatter_svg(path, layers: dict[str, np.ndarray], title: str = "", size: int = 480, max_points: int = 2000) -> None:
    """One colored point cloud per named layer, with a legend."""
    svg = _frame(size, size, title)
    lo, hi = _bounds(list(layers.values()))
    margin, inner = 30, size - 60
    for k, (name, pts) in enumerate(layers.items()):
        color = PALETTE[k % len(PALETTE)]
        g = ET.SubElement(svg, "g", fill=color, opacity="0.6")
        pts = np.asarray(pts, dtype=float)[:max_points]
        uv = (pts - lo) / (hi - lo)
        for u, v in uv:
            ET.SubElement(g, "circle", cx=f"{margin + u * inner:.2f}", cy=f"{margin + (1 - v) * inner:.2f}", r="1.6")
        lab = ET.SubElement(svg, "text", x=str(margin), y=str(size - 8 - 14 * (len(layers) - 1 - k)), fill=color)
        lab.set("font-size", "12")
        lab.set("font-family", "sans-serif")
        lab.text = name
    _write(svg, path)


def _viridis_like(v: float) -> str:
    # blue -> green -> yellow ramp
    stops = np.array([[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]], dtype=float)
    x = float(np.clip(v, 0.0, 1.0)) * (len(stops) - 1)
    i = min(int(x), len(stops) - 2)
    rgb = stops[i] + (x - i) * (stops[i + 1] - stops[i])
    return "#%02x%02x%02x" % tuple(int(round(c)) for c in rgb)


def heatmap_svg(path, values: np.ndarray, title: str = "", size: int = 480) -> None:
    """Cell-colored heat map; row 0 of ``values`` is drawn at the bottom."""
    values = np.asarray(values, dtype=float)
    svg = _frame(size, size, title)
    ny, nx = values.shape
    finite = values[np.isfinite(values)]
    lo, hi = (finite.min(), finite.max()) if finite.size else (0.0, 1.0)
    scale = (hi - lo) or 1.0
    margin, inner = 30, size - 60
    cw, ch = inner / nx, inner / ny
    g = ET.SubElement(svg, "g")
    for r in range(ny):
        for q in range(nx):
            v = values[r, q]
            fill = _viridis_like((v - lo) / scale) if np.isfinite(v) else "#cccccc"
            ET.SubElement(g, "rect", x=f"{margin + q * cw:.2f}", y=f"{margin + (ny - 1 - r) * ch:.2f}",
                          width=f"{cw + 0.05:.2f}", height=f"{ch + 0.05:.2f}", fill=fill)
    _write(svg, path)
