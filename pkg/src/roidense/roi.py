"""Region-of-interest feature extraction: bilinear alignment vs. quantized
max pooling, each with a backward pass.

Coordinate convention: the feature value at array index (i, j) is a point
sample at continuous position (x=j, y=i). RoI edges are inclusive point
coordinates in those units; callers convert from image coordinates themselves
(there is no spatial-scale parameter).

``roi_align`` never quantizes: each output bin averages a regular grid of
sample points, each read by bilinear interpolation, so the output moves
continuously as the roi moves. ``roi_pool`` snaps the roi to whole cells and
takes per-bin maxima, so the output is piecewise constant in the roi
coordinates. That contrast is load-bearing and is exercised directly by the
test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class RoIBox:
    """One region in continuous feature-map coordinates plus its batch index."""
    batch_index: int
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.batch_index < 0:
            raise DomainError(f"batch_index must be >= 0, got {self.batch_index}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise DomainError(
                f"roi corners out of order: ({self.x1}, {self.y1}) .. "
                f"({self.x2}, {self.y2})")


@dataclass(frozen=True)
class RoiSpec:
    """Pooled output size and (for alignment) sample points per bin axis."""
    out_h: int
    out_w: int
    sampling_ratio: int = 2

    def __post_init__(self):
        if min(self.out_h, self.out_w, self.sampling_ratio) < 1:
            raise DomainError(f"roi spec fields must be positive: {self}")


def _check_rois(features: Tensor, rois: Sequence[RoIBox]) -> None:
    n = features.shape.n
    for i, r in enumerate(rois):
        if r.batch_index >= n:
            raise IndexError(
                f"roi {i} has batch_index {r.batch_index}, batch size is {n}")


def _sample_coords(lo: float, hi: float, bins: int, ratio: int,
                   limit: int) -> np.ndarray:
    """Clamped 1-D sample coordinates for all bins, shape (bins * ratio,)."""
    extent = (hi - lo) / bins
    pts = lo + (np.arange(bins * ratio) + 0.5) / ratio * extent
    return np.clip(pts, 0.0, limit - 1.0)


def _bilinear_pieces(coords: np.ndarray, limit: int):
    lo = np.floor(coords).astype(np.int64)
    lo = np.clip(lo, 0, limit - 1)
    hi = np.minimum(lo + 1, limit - 1)
    frac = coords - lo
    return lo, hi, frac


def roi_align(features: Tensor, rois: Sequence[RoIBox], spec: RoiSpec) -> Tensor:
    """Average of bilinearly interpolated sample points per output bin.

    Output shape (R, C, out_h, out_w). Bin (r, c) holds the mean of
    sampling_ratio**2 samples placed on a regular grid inside the bin; sample
    coordinates are clamped to the map before interpolation. Degenerate rois
    are legal: all samples collapse onto the boundary segment or point.
    """
    _check_rois(features, rois)
    _, c, h, w = features.shape
    s = spec.sampling_ratio
    out = np.empty((len(rois), c, spec.out_h, spec.out_w), dtype=np.float64)
    for idx, roi in enumerate(rois):
        ys = _sample_coords(roi.y1, roi.y2, spec.out_h, s, h)
        xs = _sample_coords(roi.x1, roi.x2, spec.out_w, s, w)
        y0, y1, fy = _bilinear_pieces(ys, h)
        x0, x1, fx = _bilinear_pieces(xs, w)
        fmap = features.data[roi.batch_index]
        v00 = fmap[:, y0[:, None], x0[None, :]]
        v01 = fmap[:, y0[:, None], x1[None, :]]
        v10 = fmap[:, y1[:, None], x0[None, :]]
        v11 = fmap[:, y1[:, None], x1[None, :]]
        wy = fy[:, None]
        wx = fx[None, :]
        vals = ((1 - wy) * (1 - wx) * v00 + (1 - wy) * wx * v01
                + wy * (1 - wx) * v10 + wy * wx * v11)
        out[idx] = vals.reshape(c, spec.out_h, s, spec.out_w, s).mean(axis=(2, 4))
    return Tensor(out)


def roi_align_backward(features: Tensor, rois: Sequence[RoIBox], spec: RoiSpec,
                       grad_out: Tensor) -> Tensor:
    """Route each bin's gradient to the four neighbors of every sample point,
    weighted bilinearly and scaled by 1/sampling_ratio**2."""
    _check_rois(features, rois)
    n, c, h, w = features.shape
    s = spec.sampling_ratio
    if grad_out.shape != (len(rois), c, spec.out_h, spec.out_w):
        raise ShapeError(
            f"grad_out shape {tuple(grad_out.shape)} does not match "
            f"({len(rois)}, {c}, {spec.out_h}, {spec.out_w})")
    grad = np.zeros((n, c, h * w))
    chan = np.arange(c)[:, None, None]
    for idx, roi in enumerate(rois):
        ys = _sample_coords(roi.y1, roi.y2, spec.out_h, s, h)
        xs = _sample_coords(roi.x1, roi.x2, spec.out_w, s, w)
        y0, y1, fy = _bilinear_pieces(ys, h)
        x0, x1, fx = _bilinear_pieces(xs, w)
        # per-sample gradient: bin gradient spread evenly over its s*s samples
        g = np.repeat(np.repeat(grad_out.data[idx], s, axis=1), s, axis=2) / (s * s)
        wy = fy[:, None]
        wx = fx[None, :]
        plane = grad[roi.batch_index]
        np.add.at(plane, (chan, (y0[:, None] * w + x0[None, :])[None]),
                  (1 - wy) * (1 - wx) * g)
        np.add.at(plane, (chan, (y0[:, None] * w + x1[None, :])[None]),
                  (1 - wy) * wx * g)
        np.add.at(plane, (chan, (y1[:, None] * w + x0[None, :])[None]),
                  wy * (1 - wx) * g)
        np.add.at(plane, (chan, (y1[:, None] * w + x1[None, :])[None]),
                  wy * wx * g)
    return Tensor(grad.reshape(n, c, h, w))


def _quantized_edges(lo: float, hi: float, bins: int, limit: int) -> list[tuple[int, int]]:
    """Cell ranges [start, stop) per bin after snapping the roi to whole cells.

    The roi edge is rounded down at the low end and up at the high end; the
    resulting run of cells is divided by floor/ceil edges, and every bin is
    clamped to cover at least one in-range cell.
    """
    cell_lo = int(np.floor(lo))
    cell_hi = int(np.ceil(hi))
    cell_lo = min(max(cell_lo, 0), limit - 1)
    cell_hi = min(max(cell_hi, cell_lo), limit - 1)
    count = cell_hi - cell_lo + 1
    edges = []
    for b in range(bins):
        start = cell_lo + (b * count) // bins
        stop = cell_lo + -((-(b + 1) * count) // bins)  # ceil division
        if stop <= start:
            stop = start + 1
        edges.append((start, min(stop, cell_hi + 1)))
    return edges


def roi_pool(features: Tensor, rois: Sequence[RoIBox],
             spec: RoiSpec) -> tuple[Tensor, np.ndarray]:
    """Quantized max pooling over the roi; returns values and argmax indices.

    The argmax array has shape (R, C, out_h, out_w) and stores flat h*W + w
    indices into the roi's batch plane; ties break to the lowest flat index.
    """
    _check_rois(features, rois)
    _, c, h, w = features.shape
    values = np.empty((len(rois), c, spec.out_h, spec.out_w), dtype=np.float64)
    argmax = np.empty((len(rois), c, spec.out_h, spec.out_w), dtype=np.int64)
    for idx, roi in enumerate(rois):
        row_edges = _quantized_edges(roi.y1, roi.y2, spec.out_h, h)
        col_edges = _quantized_edges(roi.x1, roi.x2, spec.out_w, w)
        fmap = features.data[roi.batch_index]
        for r, (r0, r1) in enumerate(row_edges):
            for q, (c0, c1) in enumerate(col_edges):
                window = fmap[:, r0:r1, c0:c1].reshape(c, -1)
                flat = window.argmax(axis=1)
                rr, cc = np.divmod(flat, c1 - c0)
                values[idx, :, r, q] = window[np.arange(c), flat]
                argmax[idx, :, r, q] = (r0 + rr) * w + (c0 + cc)
    return Tensor(values), argmax


def roi_pool_backward(features: Tensor, rois: Sequence[RoIBox], spec: RoiSpec,
                      argmax: np.ndarray, grad_out: Tensor) -> Tensor:
    """Scatter each bin's gradient onto its recorded argmax cell."""
    _check_rois(features, rois)
    n, c, h, w = features.shape
    expected = (len(rois), c, spec.out_h, spec.out_w)
    if grad_out.shape != expected or argmax.shape != expected:
        raise ShapeError(
            f"roi_pool backward expects shape {expected}, got "
            f"grad {tuple(grad_out.shape)} / argmax {argmax.shape}")
    grad = np.zeros((n, c, h * w))
    chan = np.arange(c)[:, None, None]
    for idx, roi in enumerate(rois):
        np.add.at(grad[roi.batch_index], (chan, argmax[idx]), grad_out.data[idx])
    return Tensor(grad.reshape(n, c, h, w))
