"""Axis-aligned box arithmetic and bilinear region pooling.

Boxes are continuous ``[x1, x2) x [y1, y2)`` rectangles in scene units, so
``area = (x2 - x1) * (y2 - y1)`` with no +1 pixel term.  Feature grids use the
convention that cell ``(i, j)`` (row ``i``, column ``j``) is centred at
``(j + 0.5, i + 0.5)`` in grid coordinates; a grid with ``stride`` s covers
``width * s`` scene units horizontally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class InvalidRegionError(ValueError):
    """Raised when a box has no area left after clipping to a grid."""


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"box corners out of order: {coords}")

    @classmethod
    def from_seq(cls, values: Sequence[float]) -> "BBox":
        x1, y1, x2, y2 = (float(v) for v in values)
        return cls(x1, y1, x2, y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def clip(self, width: float, height: float) -> "BBox":
        """Clip to ``[0, width] x [0, height]``; may produce a zero-area box."""
        x1 = min(max(self.x1, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        x2 = min(max(self.x2, 0.0), width)
        y2 = min(max(self.y2, 0.0), height)
        return BBox(x1, y1, x2, y2)


@dataclass(frozen=True)
class ScoredBox:
    box: BBox
    score: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


@dataclass
class FeatureGrid:
    """Dense ``(height, width, dim)`` feature map.

    ``stride`` is the number of scene units per cell; region boxes given in
    scene coordinates are divided by it before sampling.
    """

    values: np.ndarray
    stride: float = 1.0

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[2] < 1:
            raise ValueError(f"grid values must have shape (h, w, dim>=1), got {self.values.shape}")
        if min(self.values.shape[:2]) < 1:
            raise ValueError("grid must have at least one cell")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")
        if not self.stride > 0:
            raise ValueError("stride must be positive")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


@dataclass
class _ReadCounter:
    """Counts feature-grid sampling calls; the bench asserts the cached path never bumps it."""

    count: int = 0
    cells: int = field(default=0)

    def bump(self, n_cells: int) -> None:
        self.count += 1
        self.cells += n_cells


grid_reads = _ReadCounter()


def boxes_to_array(boxes: Iterable[BBox]) -> np.ndarray:
    arr = np.array([b.as_list() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` box arrays; zero-union pairs give 0."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def nms_order(boxes: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Deterministic processing order: score desc, then x1 asc, then y1 asc."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    # lexsort keys are applied last-to-first
    return np.lexsort((boxes[:, 1], boxes[:, 0], -scores))


def nms_indices(
    boxes: np.ndarray,
    scores: np.ndarray,
    iou_threshold: float,
    max_keep: int | None = None,
) -> np.ndarray:
    """Greedy suppression over arrays; returns kept indices in processing order.

    A candidate is dropped when its IoU with an already-kept box exceeds
    ``iou_threshold``.  ``max_keep`` stops early once that many survive.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = boxes.shape[0]
    if n == 0 or max_keep == 0:
        return np.empty(0, dtype=np.int64)
    order = nms_order(boxes, scores)
    b = boxes[order]
    areas = box_area(b)
    alive = np.ones(n, dtype=bool)
    keep: list[int] = []
    for pos in range(n):
        if not alive[pos]:
            continue
        keep.append(int(order[pos]))
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = pos + 1
        if rest >= n:
            break
        tail = b[rest:]
        iw = np.minimum(b[pos, 2], tail[:, 2]) - np.maximum(b[pos, 0], tail[:, 0])
        ih = np.minimum(b[pos, 3], tail[:, 3]) - np.maximum(b[pos, 1], tail[:, 1])
        inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
        union = areas[pos] + areas[rest:] - inter
        ov = np.zeros_like(inter)
        np.divide(inter, union, out=ov, where=union > 0)
        alive[rest:] &= ov <= iou_threshold
    return np.asarray(keep, dtype=np.int64)


def nms(candidates: Sequence[ScoredBox], iou_threshold: float) -> list[ScoredBox]:
    """Greedy non-maximum suppression, output sorted by descending score."""
    if not candidates:
        if not 0.0 <= iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
        return []
    boxes = boxes_to_array(c.box for c in candidates)
    scores = np.array([c.score for c in candidates], dtype=np.float64)
    return [candidates[i] for i in nms_indices(boxes, scores, iou_threshold)]


def _bilinear(values: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``values`` (h, w, d) at grid-coordinate points; edge cells are clamped."""
    h, w, _ = values.shape
    u = np.clip(xs - 0.5, 0.0, w - 1.0)
    v = np.clip(ys - 0.5, 0.0, h - 1.0)
    j0 = np.minimum(np.floor(u).astype(np.int64), max(w - 2, 0))
    i0 = np.minimum(np.floor(v).astype(np.int64), max(h - 2, 0))
    j1 = np.minimum(j0 + 1, w - 1)
    i1 = np.minimum(i0 + 1, h - 1)
    fx = (u - j0)[..., None]
    fy = (v - i0)[..., None]
    top = values[i0, j0] * (1.0 - fx) + values[i0, j1] * fx
    bot = values[i1, j0] * (1.0 - fx) + values[i1, j1] * fx
    return top * (1.0 - fy) + bot * fy


def _grid_boxes(grid: FeatureGrid, boxes: np.ndarray) -> np.ndarray:
    g = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) / grid.stride
    g[:, [0, 2]] = np.clip(g[:, [0, 2]], 0.0, grid.width)
    g[:, [1, 3]] = np.clip(g[:, [1, 3]], 0.0, grid.height)
    degenerate = (g[:, 2] <= g[:, 0]) | (g[:, 3] <= g[:, 1])
    if np.any(degenerate):
        bad = int(np.flatnonzero(degenerate)[0])
        raise InvalidRegionError(f"box {boxes[bad].tolist()} has zero area on a {grid.height}x{grid.width} grid")
    return g


def roi_pool_batch(grid: FeatureGrid, boxes: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Pool ``(n, 4)`` scene boxes to ``(n, out_h, out_w, dim)``.

    One bilinear sample is taken at the centre of every sub-cell of the
    clipped box.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be at least 1x1")
    g = _grid_boxes(grid, boxes)
    fy = (np.arange(out_h) + 0.5) / out_h
    fx = (np.arange(out_w) + 0.5) / out_w
    ys = g[:, 1, None] + fy[None, :] * (g[:, 3] - g[:, 1])[:, None]
    xs = g[:, 0, None] + fx[None, :] * (g[:, 2] - g[:, 0])[:, None]
    yy = np.broadcast_to(ys[:, :, None], (g.shape[0], out_h, out_w))
    xx = np.broadcast_to(xs[:, None, :], (g.shape[0], out_h, out_w))
    grid_reads.bump(4 * yy.size)
    return _bilinear(grid.values, xx, yy)


def roi_pool(grid: FeatureGrid, box: BBox, out_h: int, out_w: int) -> np.ndarray:
    return roi_pool_batch(grid, np.array([box.as_list()]), out_h, out_w)[0]


def pool_region_embeddings(grids: Sequence[FeatureGrid], boxes: np.ndarray) -> np.ndarray:
    """Mean of the 2x2 pooled samples over every grid, for each of ``(n, 4)`` boxes."""
    if not grids:
        raise ValueError("at least one feature grid is required")
    dims = {g.dim for g in grids}
    if len(dims) != 1:
        raise ValueError(f"grids disagree on feature dim: {sorted(dims)}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    total = np.zeros((boxes.shape[0], grids[0].dim))
    for g in grids:
        total += roi_pool_batch(g, boxes, 2, 2).mean(axis=(1, 2))
    return total / len(grids)


def pool_region_embedding(grids: Sequence[FeatureGrid], box: BBox) -> np.ndarray:
    return pool_region_embeddings(grids, np.array([box.as_list()]))[0]


def normalize_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, eps)
