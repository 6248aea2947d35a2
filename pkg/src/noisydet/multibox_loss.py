"""Multibox loss split into individually tagged records.

Three components are produced per frame: cross-entropy of positive anchors
against their matched category, cross-entropy of mined hard negatives
against background, and smooth-L1 box regression of positives. Logit
column 0 is background; categories occupy columns ``1..K``.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from noisydet.geometry import IGNORED, AnchorGrid, MatchResult, encode_boxes, match_anchors

BACKGROUND = 0


class Component(enum.IntEnum):
    POS_CE = 0
    NEG_CE = 1
    BOX = 2

    @property
    def label(self) -> str:
        return {0: "pos_ce", 1: "neg_ce", 2: "box"}[int(self)]

    @classmethod
    def parse(cls, text: str) -> "Component":
        table = {"pos_ce": cls.POS_CE, "neg_ce": cls.NEG_CE, "box": cls.BOX}
        return table[text.lower()]


class ShapeMismatch(ValueError):
    pass


def ceil_count(x: float) -> int:
    """Ceiling that ignores float fuzz, e.g. ``0.7 * 10`` gives 7 not 8."""
    return int(math.ceil(round(x, 9)))


def softmax_cross_entropy(logits: Sequence[float], target: int) -> float:
    z = np.asarray(logits, dtype=float)
    m = z.max()
    return float(m + math.log(np.exp(z - m).sum()) - z[target])


def cross_entropy_rows(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-row ``-log softmax(logits)[target]`` for a ``(n, K+1)`` array."""
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return lse - logits[np.arange(len(logits)), targets]


def smooth_l1(pred: Sequence[float], target: Sequence[float]) -> float:
    d = np.abs(np.asarray(pred, dtype=float) - np.asarray(target, dtype=float))
    return float(np.where(d < 1.0, 0.5 * d * d, d - 0.5).sum())


def smooth_l1_rows(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    d = np.abs(pred - target)
    return np.where(d < 1.0, 0.5 * d * d, d - 0.5).sum(axis=1)


def n_hard_negatives(n_pos: int, ratio: float) -> int:
    return ceil_count(ratio * n_pos) if n_pos > 0 else ceil_count(ratio)


def mine_hard_negatives(neg_losses, n_pos: int, ratio: float = 3.0) -> np.ndarray:
    """Anchor ids of the highest-loss negatives, ``ceil(ratio * n_pos)`` of them.

    ``neg_losses`` is a sequence of ``(anchor_id, loss)`` pairs or an
    ``(n, 2)`` array. With no positives, ``ceil(ratio)`` negatives are taken
    so background still trains. Ties go to the lower anchor id. The result is
    sorted by anchor id.
    """
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    arr = np.asarray(neg_losses, dtype=float).reshape(-1, 2)
    ids, losses = arr[:, 0].astype(np.int64), arr[:, 1]
    k = min(n_hard_negatives(n_pos, ratio), len(ids))
    order = np.lexsort((ids, -losses))
    return np.sort(ids[order[:k]])


@dataclass(frozen=True)
class LossRecord:
    frame_id: str
    anchor_id: int
    component: Component
    value: float
    gt_index: int | None = None

    @property
    def key(self) -> tuple[str, int, Component]:
        return (self.frame_id, self.anchor_id, self.component)


@dataclass(frozen=True)
class FrameTargets:
    """Per-anchor training targets for one frame.

    ``classes[a]`` is the category column for positives, BACKGROUND for
    negatives and -1 for ignored anchors; ``gt_index[a]`` is the matched gt
    (-1 otherwise); ``box_targets`` holds encoded offsets (zero off positives).
    """

    frame_id: str
    classes: np.ndarray
    gt_index: np.ndarray
    box_targets: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.gt_index >= 0

    @property
    def n_positive(self) -> int:
        return int(np.count_nonzero(self.gt_index >= 0))


def build_targets(
    frame_id: str,
    grid: AnchorGrid,
    match: MatchResult,
    gt_boxes: np.ndarray,
    gt_classes: Sequence[int],
) -> FrameTargets:
    """Training targets from a match; ``gt_classes`` are 1-based category columns."""
    assign = match.assignment
    n = len(grid)
    classes = np.full(n, BACKGROUND, dtype=np.int64)
    classes[assign == IGNORED] = -1
    pos = assign >= 0
    gt_cls = np.asarray(gt_classes, dtype=np.int64)
    classes[pos] = gt_cls[assign[pos]]
    box_targets = np.zeros((n, 4))
    if pos.any():
        box_targets[pos] = encode_boxes(np.asarray(gt_boxes, dtype=float)[assign[pos]], grid.boxes[pos])
    gt_index = np.where(pos, assign, -1)
    return FrameTargets(frame_id, classes, gt_index, box_targets)


def targets_for_annotations(
    frame_id: str,
    grid: AnchorGrid,
    annotations: Sequence,
    category_set: Sequence[str],
    pos_threshold: float = 0.5,
    ignore_threshold: float | None = None,
) -> FrameTargets:
    col = {c: i + 1 for i, c in enumerate(category_set)}
    match = match_anchors(grid, annotations, pos_threshold, ignore_threshold)
    boxes = np.array([[a.box.left, a.box.top, a.box.right, a.box.bottom] for a in annotations]).reshape(-1, 4)
    classes = [col.get(a.category, -1) for a in annotations]
    return build_targets(frame_id, grid, match, boxes, classes)


@dataclass(frozen=True, eq=False)
class LossBreakdown:
    """Columnar collection of loss records for a batch.

    Records are kept in canonical order (frame_id, component, anchor_id) so
    two breakdowns over the same keys line up element by element.
    """

    frame_ids: np.ndarray  # str
    anchor_ids: np.ndarray  # int64
    components: np.ndarray  # int8, Component values
    values: np.ndarray  # float64
    gt_index: np.ndarray  # int64, -1 for NEG_CE
    positives: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        order = np.lexsort((self.anchor_ids, self.components, self.frame_ids))
        if not np.array_equal(order, np.arange(len(order))):
            for name in ("frame_ids", "anchor_ids", "components", "values", "gt_index"):
                object.__setattr__(self, name, getattr(self, name)[order])

    def __len__(self) -> int:
        return len(self.values)

    @property
    def frames(self) -> list[str]:
        return sorted(self.positives)

    @property
    def records(self) -> list[LossRecord]:
        return [
            LossRecord(str(f), int(a), Component(int(c)), float(v), None if g < 0 else int(g))
            for f, a, c, v, g in zip(self.frame_ids, self.anchor_ids, self.components, self.values, self.gt_index)
        ]

    def keys(self) -> set[tuple[str, int, Component]]:
        return {(str(f), int(a), Component(int(c))) for f, a, c in zip(self.frame_ids, self.anchor_ids, self.components)}

    def same_keys(self, other: "LossBreakdown") -> bool:
        return (
            self.positives.keys() == other.positives.keys()
            and np.array_equal(self.frame_ids, other.frame_ids)
            and np.array_equal(self.anchor_ids, other.anchor_ids)
            and np.array_equal(self.components, other.components)
        )

    def component_mask(self, component: Component) -> np.ndarray:
        return self.components == int(component)

    def normalizers(self) -> np.ndarray:
        """Per-record ``max(1, n_pos)`` of the record's frame."""
        return np.array([max(1, self.positives[str(f)]) for f in self.frame_ids], dtype=float)

    def frame_totals(self) -> dict[str, float]:
        """Positives-normalised total loss per frame."""
        totals = {f: 0.0 for f in self.positives}
        for f in totals:
            sel = self.frame_ids == f
            totals[f] = float(self.values[sel].sum()) / max(1, self.positives[f])
        return totals

    def with_values(self, values: np.ndarray) -> "LossBreakdown":
        return LossBreakdown(self.frame_ids, self.anchor_ids, self.components, np.asarray(values, float), self.gt_index, dict(self.positives))

    @classmethod
    def from_records(cls, records: Iterable[LossRecord], positives: dict[str, int] | None = None) -> "LossBreakdown":
        records = list(records)
        for r in records:
            if not (math.isfinite(r.value) and r.value >= 0):
                raise ValueError(f"loss value must be finite and >= 0: {r}")
            if (r.gt_index is None) != (r.component == Component.NEG_CE):
                raise ValueError(f"gt_index must be set exactly for pos_ce/box records: {r}")
        if positives is None:
            positives = {}
            for r in records:
                positives.setdefault(r.frame_id, 0)
                if r.component == Component.POS_CE:
                    positives[r.frame_id] += 1
        return cls(
            np.array([r.frame_id for r in records], dtype=str),
            np.array([r.anchor_id for r in records], dtype=np.int64),
            np.array([int(r.component) for r in records], dtype=np.int8),
            np.array([r.value for r in records], dtype=float),
            np.array([-1 if r.gt_index is None else r.gt_index for r in records], dtype=np.int64),
            dict(positives),
        )

    @classmethod
    def concat(cls, parts: Sequence["LossBreakdown"]) -> "LossBreakdown":
        positives: dict[str, int] = {}
        for p in parts:
            if positives.keys() & p.positives.keys():
                raise ValueError("frames repeated across breakdowns")
            positives.update(p.positives)
        if not parts:
            return cls.from_records([], {})
        return cls(
            np.concatenate([p.frame_ids for p in parts]).astype(str),
            np.concatenate([p.anchor_ids for p in parts]),
            np.concatenate([p.components for p in parts]),
            np.concatenate([p.values for p in parts]),
            np.concatenate([p.gt_index for p in parts]),
            positives,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame_id", "anchor_id", "component", "value", "gt_index"])
        for r in self.records:
            w.writerow([r.frame_id, r.anchor_id, r.component.label, repr(r.value), "" if r.gt_index is None else r.gt_index])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LossBreakdown":
        rows = list(csv.DictReader(io.StringIO(text)))
        records = [
            LossRecord(
                row["frame_id"],
                int(row["anchor_id"]),
                Component.parse(row["component"]),
                float(row["value"]),
                None if row["gt_index"] == "" else int(row["gt_index"]),
            )
            for row in rows
        ]
        return cls.from_records(records)


def frame_breakdown(
    logits: np.ndarray,
    offsets: np.ndarray,
    targets: FrameTargets,
    neg_ratio: float = 3.0,
    box_weight: float = 1.0,
    negatives: np.ndarray | None = None,
) -> LossBreakdown:
    """Breakdown for one frame. ``negatives`` overrides mining with a fixed
    anchor set (used to re-evaluate a peer's records)."""
    n = len(targets.classes)
    if logits.shape[0] != n or offsets.shape != (n, 4):
        raise ShapeMismatch(f"predictions {logits.shape}/{offsets.shape} do not match {n} anchors")
    pos = np.flatnonzero(targets.gt_index >= 0)
    n_pos = len(pos)
    if negatives is None:
        neg = np.flatnonzero(targets.classes == BACKGROUND)
        neg_loss = cross_entropy_rows(logits[neg], np.zeros(len(neg), dtype=np.int64))
        k = min(n_hard_negatives(n_pos, neg_ratio), len(neg))
        order = np.lexsort((neg, -neg_loss))[:k]
        neg_ids = np.sort(neg[order])
        neg_vals = neg_loss[order][np.argsort(neg[order])]
    else:
        neg_ids = np.asarray(negatives, dtype=np.int64)
        neg_vals = cross_entropy_rows(logits[neg_ids], np.zeros(len(neg_ids), dtype=np.int64))
    pos_ce = cross_entropy_rows(logits[pos], targets.classes[pos])
    box = box_weight * smooth_l1_rows(offsets[pos], targets.box_targets[pos])
    m = len(neg_ids)
    return LossBreakdown(
        np.full(2 * n_pos + m, targets.frame_id),
        np.concatenate([pos, neg_ids, pos]).astype(np.int64),
        np.concatenate([np.full(n_pos, 0), np.full(m, 1), np.full(n_pos, 2)]).astype(np.int8),
        np.concatenate([pos_ce, neg_vals, box]),
        np.concatenate([targets.gt_index[pos], np.full(m, -1), targets.gt_index[pos]]).astype(np.int64),
        {targets.frame_id: n_pos},
    )


def compute_breakdown(
    predictions: tuple[np.ndarray, np.ndarray],
    match: MatchResult,
    frame_id: str,
    grid: AnchorGrid,
    gt_boxes: np.ndarray,
    gt_classes: Sequence[int],
    neg_ratio: float = 3.0,
    box_weight: float = 1.0,
) -> LossBreakdown:
    """Loss records for one frame from ``(logits, offsets)`` predictions."""
    logits, offsets = predictions
    if len(logits) != len(grid) or len(offsets) != len(grid):
        raise ShapeMismatch(f"{len(logits)} predictions for {len(grid)} anchors")
    targets = build_targets(frame_id, grid, match, gt_boxes, gt_classes)
    return frame_breakdown(np.asarray(logits, float), np.asarray(offsets, float), targets, neg_ratio, box_weight)


def revalue(
    b: LossBreakdown,
    logits: dict[str, np.ndarray] | np.ndarray,
    offsets: dict[str, np.ndarray] | np.ndarray,
    targets: dict[str, FrameTargets],
    box_weight: float = 1.0,
) -> LossBreakdown:
    """Same records as ``b`` with loss values computed from other predictions.

    ``logits``/``offsets`` map frame id to that frame's per-anchor arrays.
    """
    values = np.empty(len(b))
    for fid in b.positives:
        sel = np.flatnonzero(b.frame_ids == fid)
        t = targets[fid]
        a = b.anchor_ids[sel]
        c = b.components[sel]
        lg, of = logits[fid], offsets[fid]
        out = np.empty(len(sel))
        ce = c != Component.BOX
        tgt = np.where(c[ce] == Component.NEG_CE, BACKGROUND, t.classes[a[ce]])
        out[ce] = cross_entropy_rows(lg[a[ce]], tgt)
        bx = ~ce
        out[bx] = box_weight * smooth_l1_rows(of[a[bx]], t.box_targets[a[bx]])
        values[sel] = out
    return b.with_values(values)
