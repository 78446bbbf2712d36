"""SVG figures: episode overlays and warp comparisons.

Support keypoints are circles, predictions tilted crosses with their 3σ
ellipse, and a thin segment links each prediction to its ground truth.
Every figure carries its provenance in a <metadata> block.
"""

from __future__ import annotations

import base64
import html
import io
import json
import math

import numpy as np
from PIL import Image

PALETTE = ("#e6194b", "#3cb44b", "#ffe119", "#4363d8", "#f58231", "#911eb4",
           "#46f0f0", "#f032e6", "#bcf60c", "#fabebe", "#008080", "#e6beff")


def colour(t):
    return PALETTE[int(t) % len(PALETTE)]


def png_data_uri(rgb):
    buf = io.BytesIO()
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def _metadata(provenance):
    text = json.dumps(provenance, sort_keys=True, separators=(",", ":"))
    return f"<metadata>{html.escape(text, quote=False)}</metadata>"


def _image(rgb, x, y, zoom):
    h, w = np.asarray(rgb).shape[:2]
    return (f'<image x="{x}" y="{y}" width="{w * zoom}" height="{h * zoom}" '
            f'image-rendering="pixelated" href="{png_data_uri(rgb)}"/>')


def _cross(x, y, size, stroke):
    d = size / math.sqrt(2)
    return (f'<path d="M{x - d:.2f},{y - d:.2f}L{x + d:.2f},{y + d:.2f}'
            f'M{x - d:.2f},{y + d:.2f}L{x + d:.2f},{y - d:.2f}" stroke="{stroke}" stroke-width="2"/>')


def _ellipse(x, y, axes, angle, stroke, zoom):
    rx, ry = max(axes[0] * zoom, 0.5), max(axes[1] * zoom, 0.5)
    return (f'<ellipse cx="{x:.2f}" cy="{y:.2f}" rx="{rx:.2f}" ry="{ry:.2f}" '
            f'transform="rotate({math.degrees(angle):.3f} {x:.2f} {y:.2f})" '
            f'fill="none" stroke="{stroke}" stroke-width="1.5"/>')


def episode_overlay(support, query, estimates, provenance, zoom=4, names=None):
    """Side-by-side support/query panels for one episode.

    ``estimates`` is a list of KeypointEstimate; ground truth comes from
    ``query`` where visible.
    """
    l0 = support.image.shape[0]
    side = l0 * zoom
    gap = 12
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * side + gap}" height="{side + 24}">',
             _metadata(provenance),
             f'<text x="4" y="16" font-size="14">support</text>',
             f'<text x="{side + gap + 4}" y="16" font-size="14">query</text>',
             _image(support.image, 0, 24, zoom),
             _image(query.image, side + gap, 24, zoom)]
    for e in estimates:
        t = e.type
        c = colour(t)
        if isinstance(t, int) and support.visible[t]:
            sx, sy = support.keypoints[t] * zoom
            parts.append(f'<circle cx="{sx:.2f}" cy="{sy + 24:.2f}" r="5" fill="none" stroke="{c}" '
                         f'stroke-width="2"><title>{html.escape(_name(t, names))}</title></circle>')
        px, py = e.position * zoom
        px, py = px + side + gap, py + 24
        ell = e.ellipse
        parts.append(_ellipse(px, py, ell.axes, ell.angle, c, zoom))
        parts.append(_cross(px, py, 6, c))
        if isinstance(t, int) and query.visible[t]:
            gx, gy = query.keypoints[t] * zoom
            parts.append(f'<line x1="{px:.2f}" y1="{py:.2f}" x2="{gx + side + gap:.2f}" y2="{gy + 24:.2f}" '
                         f'stroke="{c}" stroke-width="1" stroke-dasharray="3,2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _name(t, names):
    if names and isinstance(t, int) and t < len(names):
        return names[t]
    return str(t)


def comparison(panels, provenance, zoom=3, points=None):
    """Row of titled image panels; ``points`` maps a panel index to a list
    of (x, y) landmarks drawn as small circles."""
    points = points or {}
    h, w = np.asarray(panels[0][1]).shape[:2]
    gap = 10
    width = len(panels) * (w * zoom + gap) - gap
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{h * zoom + 24}">',
             _metadata(provenance)]
    for i, (title, rgb) in enumerate(panels):
        x = i * (w * zoom + gap)
        parts.append(f'<text x="{x + 4}" y="16" font-size="14">{html.escape(title)}</text>')
        parts.append(_image(rgb, x, 24, zoom))
        for k, (px, py) in enumerate(points.get(i, [])):
            parts.append(f'<circle cx="{x + px * zoom:.2f}" cy="{24 + py * zoom:.2f}" r="4" fill="none" '
                         f'stroke="{PALETTE[k % len(PALETTE)]}" stroke-width="1.5"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
