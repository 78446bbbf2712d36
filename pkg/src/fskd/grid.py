"""Grid classification / offset codec, multi-scale fusion and PCK."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridCode:
    scale: int
    cell: tuple  # (gx, gy)
    offset: tuple  # (vx, vy), in half-cell units

    @property
    def label(self):
        return self.cell[1] * self.scale + self.cell[0]


@dataclass
class ScalePrediction:
    scale: int
    cell: tuple
    offset: tuple
    cov: np.ndarray | None = None


def encode_grid(u, scale, l0):
    """Map a pixel position to its grid cell and in-cell offset.

    Positions on or beyond the image border are assigned to the nearest
    valid cell and the offset is clipped to [-1, 1].
    """
    u = np.asarray(u, dtype=np.float64)
    if not np.all(np.isfinite(u)):
        raise ValueError(f"encode_grid: non-finite position {u.tolist()}")
    if l0 <= 0 or scale < 1:
        raise ValueError("encode_grid: need l0 > 0 and scale >= 1")
    cell = np.clip(np.floor(u * scale / l0), 0, scale - 1)
    # single rounding: exact for integer pixel positions
    v = np.clip((2.0 * u * scale - (2.0 * cell + 1.0) * l0) / l0, -1.0, 1.0)
    return GridCode(scale, (int(cell[0]), int(cell[1])), (float(v[0]), float(v[1])))


def encode_grid_batch(u, scale, l0):
    """Vectorised :func:`encode_grid` for an (n, 2) array.

    Returns flat labels (n,) and offsets (n, 2).
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1, 2)
    cell = np.clip(np.floor(u * scale / l0), 0, scale - 1)
    # single rounding: exact for integer pixel positions
    v = np.clip((2.0 * u * scale - (2.0 * cell + 1.0) * l0) / l0, -1.0, 1.0)
    labels = (cell[:, 1] * scale + cell[:, 0]).astype(np.int64)
    return labels, v


def decode_grid(cell, offset, scale, l0):
    gx, gy = cell
    if not (0 <= gx < scale and 0 <= gy < scale):
        raise ValueError(f"decode_grid: cell {tuple(cell)} outside {scale}x{scale} grid")
    g = np.array([gx, gy], dtype=np.float64)
    return (l0 / scale) * (g + 0.5 + 0.5 * np.asarray(offset, dtype=np.float64))


def decode_grid_batch(labels, offsets, scale, l0):
    """Vectorised :func:`decode_grid` from flat labels (n,) and offsets (n, 2)."""
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= scale * scale):
        raise ValueError(f"decode_grid_batch: label outside {scale}x{scale} grid")
    g = np.stack([labels % scale, labels // scale], axis=1).astype(np.float64)
    return (l0 / scale) * (g + 0.5 + 0.5 * np.asarray(offsets, dtype=np.float64))


def fuse_predictions(preds, l0):
    """Average the per-scale decoded positions."""
    if not preds:
        raise ValueError("fuse_predictions: no predictions to fuse")
    pts = [decode_grid(p.cell, p.offset, p.scale, l0) for p in preds]
    return np.mean(pts, axis=0)


def pck(predictions, groundtruths, visible, bbox, tau=0.1):
    """Fraction of visible keypoints within tau * max(bbox) (strictly).

    Returns None when no keypoint is visible so the caller can skip the
    sample instead of averaging in a zero.
    """
    pred = np.asarray(predictions, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(groundtruths, dtype=np.float64).reshape(-1, 2)
    vis = np.asarray(visible, dtype=bool).reshape(-1)
    if not (len(pred) == len(gt) == len(vis)):
        raise ValueError("pck: predictions, groundtruths and visibility differ in length")
    w, h = bbox
    if w <= 0 or h <= 0:
        raise ValueError(f"pck: bbox edges must be positive, got {bbox}")
    if not vis.any():
        return None
    thr = tau * max(w, h)
    err = np.linalg.norm(pred[vis] - gt[vis], axis=1)
    return float(np.count_nonzero(err < thr)) / int(vis.sum())


def pck_hits(predictions, groundtruths, visible, bbox, tau=0.1):
    """Per-keypoint correctness (None for invisible entries)."""
    thr = tau * max(bbox)
    out = []
    for p, g, v in zip(predictions, groundtruths, visible):
        if not v:
            out.append(None)
        else:
            out.append(math.dist(p, g) < thr)
    return out
