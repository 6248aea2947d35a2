"""Boxes, IoU, anchor grids, anchor matching and box encoding.

Boxes are ``(left, top, right, bottom)`` in continuous pixel coordinates.
Vectorised helpers take ``(n, 4)`` float arrays in the same layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

NEGATIVE = -1
IGNORED = -2


class InvalidBox(ValueError):
    """Raised when a box has ``left >= right`` or ``top >= bottom``."""


@dataclass(frozen=True)
class BoundingBox:
    left: float
    top: float
    right: float
    bottom: float

    def __post_init__(self):
        vals = (self.left, self.top, self.right, self.bottom)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidBox(f"non-finite box coordinates {vals}")
        if not (self.left < self.right and self.top < self.bottom):
            raise InvalidBox(f"degenerate box {vals}")

    @property
    def width(self) -> float:
        return self.right - self.left

    @property
    def height(self) -> float:
        return self.bottom - self.top

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.left + self.right), 0.5 * (self.top + self.bottom))

    def as_array(self) -> np.ndarray:
        return np.array([self.left, self.top, self.right, self.bottom], dtype=float)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)

    def clamp(self, width: float, height: float) -> "BoundingBox | None":
        """Clip to ``[0, width] x [0, height]``; None if a side drops below 1 px."""
        l, t = max(0.0, self.left), max(0.0, self.top)
        r, b = min(float(width), self.right), min(float(height), self.bottom)
        if r - l < 1.0 or b - t < 1.0:
            return None
        return BoundingBox(l, t, r, b)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.right, b.right) - max(a.left, b.left)
    ih = min(a.bottom, b.bottom) - max(a.top, b.top)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` box arrays."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def boxes_to_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([[b.left, b.top, b.right, b.bottom] for b in boxes], dtype=float)


@dataclass(frozen=True, eq=False)
class AnchorGrid:
    """Fixed anchors, ordered row-major over cells then by per-cell anchor index."""

    boxes: np.ndarray  # (n, 4)
    grid_shape: tuple[int, int, int]  # rows, cols, anchors_per_cell

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def anchors(self) -> tuple[BoundingBox, ...]:
        return tuple(BoundingBox(*map(float, row)) for row in self.boxes)

    def cell_of(self, anchor_id: int) -> tuple[int, int, int]:
        rows, cols, per_cell = self.grid_shape
        cell, k = divmod(int(anchor_id), per_cell)
        r, c = divmod(cell, cols)
        return r, c, k


def build_anchor_grid(
    image_size: tuple[float, float],
    grid_shape: tuple[int, int],
    anchor_sizes: Sequence[tuple[float, float]],
) -> AnchorGrid:
    """Place one anchor of each ``(width, height)`` at every cell centre.

    Anchors are clipped to the image; their centres always lie inside it so
    clipping never produces an empty box.
    """
    width, height = image_size
    rows, cols = grid_shape
    if rows < 1 or cols < 1:
        raise ValueError("grid dimensions must be >= 1")
    sizes = np.asarray(anchor_sizes, dtype=float).reshape(-1, 2)
    if len(sizes) == 0 or np.any(sizes <= 0):
        raise ValueError("anchor sizes must be positive")
    cy = (np.arange(rows) + 0.5) * (height / rows)
    cx = (np.arange(cols) + 0.5) * (width / cols)
    cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
    centers = np.stack([cxx.ravel(), cyy.ravel()], axis=1)  # (rows*cols, 2)
    c = np.repeat(centers, len(sizes), axis=0)
    wh = np.tile(sizes, (rows * cols, 1))
    boxes = np.concatenate([c - 0.5 * wh, c + 0.5 * wh], axis=1)
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, width)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, height)
    return AnchorGrid(boxes=boxes, grid_shape=(rows, cols, len(sizes)))


@dataclass(frozen=True, eq=False)
class MatchResult:
    """``assignment[a]`` is the gt index for positives, NEGATIVE or IGNORED otherwise.

    ``best_anchor[g]`` is the force-matched anchor of gt ``g`` (-1 if the gt
    was skipped or overlaps no anchor).
    """

    assignment: np.ndarray
    best_anchor: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.assignment >= 0

    @property
    def negative(self) -> np.ndarray:
        return self.assignment == NEGATIVE

    @property
    def n_positive(self) -> int:
        return int(np.count_nonzero(self.assignment >= 0))


def _gt_boxes_and_valid(gts) -> tuple[np.ndarray, np.ndarray]:
    boxes, valid = [], []
    for g in gts:
        box = getattr(g, "box", g)
        boxes.append([box.left, box.top, box.right, box.bottom])
        valid.append(getattr(g, "category", None) != "DontCare")
    if not boxes:
        return np.zeros((0, 4)), np.zeros(0, dtype=bool)
    return np.array(boxes, dtype=float), np.array(valid, dtype=bool)


def match_anchors(
    grid: AnchorGrid,
    gts: Sequence,
    pos_threshold: float = 0.5,
    ignore_threshold: float | None = None,
) -> MatchResult:
    """Assign anchors to ground truths.

    ``gts`` holds annotations (anything with ``.box`` and ``.category``) or
    bare boxes; DontCare annotations never receive anchors. Rules, in order:

    1. Every gt claims its highest-IoU anchor (ties to the lowest anchor
       index). Gts are served in descending order of that best IoU so that a
       contested anchor goes to the better-overlapping gt; the loser takes
       its best still-unclaimed anchor.
    2. Any other anchor whose best IoU is ``>= pos_threshold`` becomes
       positive for its argmax gt (ties to the lowest gt index).
    3. The rest are negative, or ignored when ``ignore_threshold`` is given
       and their best IoU lies in ``[ignore_threshold, pos_threshold)``.
    """
    if not 0.0 < pos_threshold < 1.0:
        raise ValueError("pos_threshold must lie in (0, 1)")
    n_anchors = len(grid)
    gt_boxes, valid = _gt_boxes_and_valid(gts)
    assignment = np.full(n_anchors, NEGATIVE, dtype=np.int64)
    best_anchor = np.full(len(gt_boxes), -1, dtype=np.int64)
    if len(gt_boxes) == 0 or not valid.any():
        return MatchResult(assignment, best_anchor)

    ious = iou_matrix(grid.boxes, gt_boxes)  # (anchors, gts)
    ious[:, ~valid] = 0.0

    # rule (ii) and (iii) first; force matches overwrite
    best_gt = np.argmax(ious, axis=1)
    best_val = ious[np.arange(n_anchors), best_gt]
    pos = best_val >= pos_threshold
    assignment[pos] = best_gt[pos]
    if ignore_threshold is not None:
        assignment[(~pos) & (best_val >= ignore_threshold)] = IGNORED

    order = sorted(
        (g for g in range(len(gt_boxes)) if valid[g]),
        key=lambda g: (-float(ious[:, g].max()), g),
    )
    claimed = np.zeros(n_anchors, dtype=bool)
    for g in order:
        col = np.where(claimed, -1.0, ious[:, g])
        a = int(np.argmax(col))
        if col[a] <= 0.0:
            continue
        claimed[a] = True
        assignment[a] = g
        best_anchor[g] = a
    return MatchResult(assignment, best_anchor)


def encode_box(gt: BoundingBox, anchor: BoundingBox) -> tuple[float, float, float, float]:
    gcx, gcy = gt.center
    acx, acy = anchor.center
    aw, ah = anchor.width, anchor.height
    return (
        (gcx - acx) / aw,
        (gcy - acy) / ah,
        math.log(gt.width / aw),
        math.log(gt.height / ah),
    )


def decode_box(offsets: Sequence[float], anchor: BoundingBox) -> BoundingBox:
    dx, dy, dw, dh = offsets
    acx, acy = anchor.center
    aw, ah = anchor.width, anchor.height
    return BoundingBox.from_center(acx + dx * aw, acy + dy * ah, aw * math.exp(dw), ah * math.exp(dh))


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Row-wise :func:`encode_box` on ``(n, 4)`` arrays."""
    gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    aw, ah = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    gcx, gcy = gt[:, 0] + 0.5 * gw, gt[:, 1] + 0.5 * gh
    acx, acy = anchors[:, 0] + 0.5 * aw, anchors[:, 1] + 0.5 * ah
    return np.stack([(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_boxes(offsets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    aw, ah = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    acx, acy = anchors[:, 0] + 0.5 * aw, anchors[:, 1] + 0.5 * ah
    # exp overflow guard for untrained predictions
    dw = np.clip(offsets[:, 2], -10.0, 10.0)
    dh = np.clip(offsets[:, 3], -10.0, 10.0)
    cx, cy = acx + offsets[:, 0] * aw, acy + offsets[:, 1] * ah
    w, h = aw * np.exp(dw), ah * np.exp(dh)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.45, top_k: int | None = None) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices by descending score."""
    scores = np.asarray(scores)
    order = np.lexsort((np.arange(len(scores)), -scores))
    ov = iou_matrix(np.asarray(boxes, dtype=float)[order], np.asarray(boxes, dtype=float)[order])
    alive = np.ones(len(order), dtype=bool)
    keep: list[int] = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(int(order[i]))
        if top_k is not None and len(keep) >= top_k:
            break
        alive &= ov[i] <= iou_threshold
    return np.array(keep, dtype=np.int64)
