"""Axis-aligned boxes in continuous point coordinates.

A box (x1, y1, x2, y2) spans inclusive point coordinates, so width = x2 - x1
(a single-point box has zero area). The same convention is used for roi
boxes, anchors, and the tight bounds recovered from binary masks.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import DomainError


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))


def box_iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when the union is degenerate."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def box_iou_matrix(rows: list[Box], cols: list[Box]) -> np.ndarray:
    """Pairwise IoU, shape (len(rows), len(cols))."""
    if not rows or not cols:
        return np.zeros((len(rows), len(cols)))
    ra = np.asarray(rows, dtype=np.float64)
    ca = np.asarray(cols, dtype=np.float64)
    iw = (np.minimum(ra[:, None, 2], ca[None, :, 2])
          - np.maximum(ra[:, None, 0], ca[None, :, 0]))
    ih = (np.minimum(ra[:, None, 3], ca[None, :, 3])
          - np.maximum(ra[:, None, 1], ca[None, :, 1]))
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_r = (ra[:, 2] - ra[:, 0]) * (ra[:, 3] - ra[:, 1])
    area_c = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    union = area_r[:, None] + area_c[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def clip_box(b: Box, width: int, height: int) -> Box:
    """Clamp corners into the point range [0, width-1] x [0, height-1]."""
    return Box(
        min(max(b.x1, 0.0), width - 1.0),
        min(max(b.y1, 0.0), height - 1.0),
        min(max(b.x2, 0.0), width - 1.0),
        min(max(b.y2, 0.0), height - 1.0),
    )


def mask_bounds(mask: np.ndarray) -> Box:
    """Tight bounds of a non-empty binary mask, in point coordinates."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise DomainError("cannot take the bounds of an empty mask")
    return Box(float(cols[0]), float(rows[0]), float(cols[-1]), float(rows[-1]))
