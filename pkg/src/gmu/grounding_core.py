"""Moment grid, interval arithmetic and the training labels built on them.

Moment ``i`` of a grid with ``T`` moments over ``D`` seconds covers
``[i * D_m, (i + 1) * D_m]`` with ``D_m = D / T``.  Proposal cell ``(i, j)``
with ``j >= i`` covers ``[i * D_m, (j + 1) * D_m]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BOUNDARY_EXPANSION = 1.5


@dataclass(frozen=True)
class MomentGrid:
    T: int
    D: float

    def __post_init__(self):
        if self.T < 2:
            raise ValueError(f"MomentGrid needs T >= 2, got {self.T}")
        if not self.D > 0:
            raise ValueError(f"MomentGrid needs D > 0, got {self.D}")

    @property
    def D_m(self) -> float:
        return self.D / self.T

    def moment_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        idx = np.arange(self.T, dtype=np.float64)
        return idx * self.D_m, (idx + 1) * self.D_m


@dataclass(frozen=True)
class Interval:
    start: float
    end: float

    def __post_init__(self):
        if not (0 <= self.start <= self.end):
            raise ValueError(f"invalid interval [{self.start}, {self.end}]")

    @property
    def length(self) -> float:
        return self.end - self.start


def interval_iou(a: Interval, b: Interval) -> float:
    """Temporal IoU.  Two identical points score 1, any other zero-length union 0."""
    union = max(a.end, b.end) - min(a.start, b.start)
    if union <= 0:
        return 1.0 if (a.start == b.start and a.end == b.end) else 0.0
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    return inter / union


def _overlap(lo: np.ndarray, hi: np.ndarray, w_lo: float, w_hi: float) -> np.ndarray:
    return np.clip(np.minimum(hi, w_hi) - np.maximum(lo, w_lo), 0.0, None)


def boundary_labels(grid: MomentGrid, gt: Interval) -> tuple[np.ndarray, np.ndarray]:
    """Start/end labels as the fraction of each moment covered by the expanded window.

    The windows are ``[t - 1.5 D_m, t + 1.5 D_m]`` around each boundary,
    clamped to the video.
    """
    if gt.end > grid.D + grid.D_m:
        raise ValueError(
            f"ground truth end {gt.end} exceeds duration {grid.D} by more than one moment"
        )
    lo, hi = grid.moment_bounds()
    half = BOUNDARY_EXPANSION * grid.D_m
    labels = []
    for t in (gt.start, gt.end):
        w_lo, w_hi = max(t - half, 0.0), min(t + half, grid.D)
        labels.append(np.clip(_overlap(lo, hi, w_lo, w_hi) / grid.D_m, 0.0, 1.0))
    return labels[0], labels[1]


def valid_mask(T: int) -> np.ndarray:
    return np.triu(np.ones((T, T), dtype=bool))


def proposal_iou_map(grid: MomentGrid, gt: Interval) -> np.ndarray:
    """Raw IoU of every valid proposal cell with ``gt``; invalid cells are 0."""
    lo, hi = grid.moment_bounds()
    starts = lo[:, None]
    ends = hi[None, :]
    inter = np.clip(np.minimum(ends, gt.end) - np.maximum(starts, gt.start), 0.0, None)
    union = np.maximum(ends, gt.end) - np.minimum(starts, gt.start)
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return np.where(valid_mask(grid.T), iou, 0.0)


def scale_iou(o, o_min: float, o_max: float):
    """Piecewise-linear remap of raw IoU through the two thresholds."""
    o = np.asarray(o, dtype=np.float64)
    y = (o - o_min) / (o_max - o_min)
    y = np.where(o <= o_min, 0.0, y)
    y = np.where(o >= o_max, 1.0, y)
    return y


def proposal_label_map(
    grid: MomentGrid, gt: Interval, o_min: float = 0.5, o_max: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(y, valid)`` where ``y`` is the scaled IoU label map."""
    if not (0 <= o_min < o_max <= 1):
        raise ValueError(f"need 0 <= o_min < o_max <= 1, got ({o_min}, {o_max})")
    valid = valid_mask(grid.T)
    y = np.where(valid, scale_iou(proposal_iou_map(grid, gt), o_min, o_max), 0.0)
    return y, valid


def tag_labels(grid: MomentGrid, gt: Interval) -> np.ndarray:
    """Binary mask of moments whose centre lies in ``gt``.

    When no centre falls inside, the single moment with maximal overlap is
    marked (lowest index on ties) so the attention loss never divides by 0.
    """
    lo, hi = grid.moment_bounds()
    centres = (lo + hi) / 2
    w_hat = ((centres >= gt.start) & (centres <= gt.end)).astype(np.float64)
    if not w_hat.any():
        overlap = _overlap(lo, hi, gt.start, gt.end)
        w_hat[int(np.argmax(overlap))] = 1.0
    return w_hat


def cell_to_interval(grid: MomentGrid, i: int, j: int) -> Interval:
    if j < i:
        raise ValueError(f"cell ({i}, {j}) lies below the diagonal")
    if not (0 <= i and j < grid.T):
        raise ValueError(f"cell ({i}, {j}) outside a grid of {grid.T} moments")
    return Interval(i * grid.D_m, (j + 1) * grid.D_m)
