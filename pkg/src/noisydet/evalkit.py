"""Detection evaluation: greedy matching, PR curves, envelope AP, max F1,
and size-bucketed reports.

Defaults follow the all-sizes protocol: IoU 0.5, no size filtering, area
under the monotone precision envelope. A KITTI-moderate filter is available
for real KITTI splits.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from noisydet.geometry import BoundingBox, iou_matrix
from noisydet.label_io import DONT_CARE, Annotation

TP, FP, IGNORE = 1, 0, -1

DEFAULT_BUCKETS = {"Small": (0.0, 25.0), "Medium": (25.0, 75.0), "Large": (75.0, math.inf)}


@dataclass(frozen=True)
class Detection:
    frame_id: str
    category: str
    box: BoundingBox
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("detection score must be finite")


@dataclass(frozen=True)
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray
    ap: float
    max_f1: float
    operating_point: tuple[float, float]  # (recall, precision) at max F1
    n_gt: int

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.recall.tolist(), self.precision.tolist(), self.thresholds.tolist()))

    def summary(self) -> dict:
        return {"ap": self.ap, "max_f1": self.max_f1, "operating_point": list(self.operating_point), "n_gt": self.n_gt}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["recall", "precision", "score_threshold"])
        for r, p, t in self.points:
            w.writerow([repr(r), repr(p), repr(t)])
        return buf.getvalue()


@dataclass(frozen=True)
class DifficultyFilter:
    """Gts failing the filter are ignored; so are unmatched detections
    shorter than ``min_height``. Defaults are the public KITTI moderate level."""

    min_height: float = 25.0
    max_occlusion: int = 1
    max_truncation: float = 0.30

    def keeps(self, a: Annotation) -> bool:
        return a.box.height >= self.min_height and a.occluded <= self.max_occlusion and a.truncated <= self.max_truncation


KITTI_MODERATE = DifficultyFilter()


def _processing_order(dets: Sequence[Detection]) -> list[int]:
    """Descending score; ties by frame_id then input order within the frame."""
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].frame_id, i))


def _ordered(dets: Sequence[Detection]) -> list[Detection]:
    return [dets[i] for i in _processing_order(dets)]


def match_detections(
    dets: Sequence[Detection],
    gts: Mapping[str, Sequence[Annotation]],
    iou_threshold: float = 0.5,
    ignore_gt=None,
    ignore_det=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy matching of detections to same-category ground truths.

    Returns ``(flags, claimed)``: ``flags[i]`` is TP, FP or IGNORE for
    ``dets[i]``; ``claimed[i]`` is the index of the claimed gt within its
    frame's annotations (-1 if none). DontCare gts and gts for which ``ignore_gt``
    returns True cannot be claimed; a detection that fails to claim but
    overlaps one of them at the threshold is IGNORE, as is an unmatched
    detection for which ``ignore_det`` returns True.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    flags = np.full(len(dets), FP, dtype=np.int64)
    claimed_gt = np.full(len(dets), -1, dtype=np.int64)
    taken: dict[str, np.ndarray] = {}
    cache: dict[tuple[str, str], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def frame_gts(fid: str, cat: str):
        key = (fid, cat)
        if key not in cache:
            anns = gts.get(fid, ())
            idx, boxes, ign = [], [], []
            for j, a in enumerate(anns):
                if a.category == cat or a.category == DONT_CARE:
                    idx.append(j)
                    boxes.append([a.box.left, a.box.top, a.box.right, a.box.bottom])
                    ign.append(a.category == DONT_CARE or bool(ignore_gt and ignore_gt(a)))
            cache[key] = (np.array(idx, dtype=np.int64), np.array(boxes, dtype=float).reshape(-1, 4), np.array(ign, dtype=bool))
        return cache[key]

    for i in _processing_order(dets):
        d = dets[i]
        idx, boxes, ign = frame_gts(d.frame_id, d.category)
        if d.frame_id not in taken:
            taken[d.frame_id] = np.zeros(len(gts.get(d.frame_id, ())), dtype=bool)
        if len(idx):
            ov = iou_matrix(np.array([[d.box.left, d.box.top, d.box.right, d.box.bottom]]), boxes)[0]
            cand = (~ign) & (~taken[d.frame_id][idx]) & (ov >= iou_threshold)
            if cand.any():
                j = int(np.flatnonzero(cand)[np.argmax(ov[cand])])
                taken[d.frame_id][idx[j]] = True
                flags[i] = TP
                claimed_gt[i] = idx[j]
                continue
            if (ign & (ov >= iou_threshold)).any():
                flags[i] = IGNORE
                continue
        if ignore_det is not None and ignore_det(d):
            flags[i] = IGNORE
    return flags, claimed_gt


def count_gts(gts: Mapping[str, Sequence[Annotation]], category: str, ignore_gt=None) -> int:
    n = 0
    for anns in gts.values():
        for a in anns:
            if a.category == category and not (ignore_gt and ignore_gt(a)):
                n += 1
    return n


def average_precision(scores: Sequence[float], flags: Sequence[int], n_gt: int) -> PRCurve:
    """PR curve over score-sorted detections with envelope AP and max F1.

    IGNORE flags are dropped. Sorting is stable, so equal scores keep the
    given order.
    """
    scores = np.asarray(scores, dtype=float)
    flags = np.asarray(flags, dtype=np.int64)
    keep = flags != IGNORE
    scores, flags = scores[keep], flags[keep]
    order = np.argsort(-scores, kind="stable")
    scores, flags = scores[order], flags[order]
    tp = np.cumsum(flags == TP)
    fp = np.cumsum(flags == FP)
    precision = tp / np.maximum(tp + fp, 1)
    recall = tp / n_gt if n_gt > 0 else np.zeros(len(tp))
    if n_gt == 0 or len(scores) == 0:
        return PRCurve(recall.astype(float), precision.astype(float), scores, 0.0, 0.0, (0.0, 0.0), int(n_gt))
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    ap = float(np.sum((mrec[steps] - mrec[steps - 1]) * mpre[steps]))
    denom = precision + recall
    f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)
    best = int(np.argmax(f1))
    return PRCurve(recall, precision, scores, ap, float(f1[best]), (float(recall[best]), float(precision[best])), int(n_gt))


def eleven_point_ap(curve: PRCurve) -> float:
    if curve.n_gt == 0 or len(curve.recall) == 0:
        return 0.0
    total = 0.0
    for t in np.linspace(0, 1, 11):
        sel = curve.recall >= t
        total += curve.precision[sel].max() if sel.any() else 0.0
    return total / 11.0


def evaluate_category(
    dets: Sequence[Detection],
    gts: Mapping[str, Sequence[Annotation]],
    category: str,
    iou_threshold: float = 0.5,
    difficulty: DifficultyFilter | None = None,
) -> PRCurve:
    mine = _ordered([d for d in dets if d.category == category])
    ignore_gt = None if difficulty is None else (lambda a: not difficulty.keeps(a))
    ignore_det = None if difficulty is None else (lambda d: d.box.height < difficulty.min_height)
    flags, _ = match_detections(mine, gts, iou_threshold, ignore_gt, ignore_det)
    return average_precision([d.score for d in mine], flags, count_gts(gts, category, ignore_gt))


@dataclass(frozen=True)
class EvalReport:
    curves: dict[str, PRCurve]
    iou_threshold: float = 0.5
    extra: dict = field(default_factory=dict)

    @property
    def mean_ap(self) -> float:
        aps = [c.ap for c in self.curves.values() if c.n_gt > 0]
        return float(np.mean(aps)) if aps else 0.0

    @property
    def mean_max_f1(self) -> float:
        vals = [c.max_f1 for c in self.curves.values() if c.n_gt > 0]
        return float(np.mean(vals)) if vals else 0.0

    def summary(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "categories": {k: v.summary() for k, v in self.curves.items()},
            "overall": {"ap": self.mean_ap, "max_f1": self.mean_max_f1},
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def evaluate(
    dets: Sequence[Detection],
    gts: Mapping[str, Sequence[Annotation]],
    categories: Sequence[str],
    iou_threshold: float = 0.5,
    difficulty: DifficultyFilter | None = None,
) -> EvalReport:
    """Per-category curves; the overall AP averages categories that have gts."""
    curves = {c: evaluate_category(dets, gts, c, iou_threshold, difficulty) for c in categories}
    return EvalReport(curves, iou_threshold)


def _measure(box: BoundingBox, by: str) -> float:
    if by == "height":
        return box.height
    if by == "area":
        return box.area
    raise ValueError(f"unknown size measure {by!r}")


def size_bucketed_report(
    dets: Sequence[Detection],
    gts: Mapping[str, Sequence[Annotation]],
    category: str,
    buckets: Mapping[str, tuple[float, float]] = DEFAULT_BUCKETS,
    by: str = "height",
    iou_threshold: float = 0.5,
) -> dict[str, PRCurve | None]:
    """Curves per size bucket ``[lo, hi)`` plus ``"All"``.

    Matching is done once over all gts. In a bucket, a TP whose gt lies in
    another bucket is ignored; an unmatched detection counts as FP only in
    the bucket of its own size. Buckets without gts map to None.
    """
    mine = _ordered([d for d in dets if d.category == category])
    flags, claimed = match_detections(mine, gts, iou_threshold)
    scores = [d.score for d in mine]
    out: dict[str, PRCurve | None] = {"All": average_precision(scores, flags, count_gts(gts, category))}

    def bucket_of(v: float) -> str | None:
        for name, (lo, hi) in buckets.items():
            if lo <= v < hi:
                return name
        return None

    for name in buckets:
        n_gt = sum(
            1 for anns in gts.values() for a in anns
            if a.category == category and bucket_of(_measure(a.box, by)) == name
        )
        if n_gt == 0:
            out[name] = None
            continue
        bflags = np.full(len(mine), IGNORE, dtype=np.int64)
        for i, d in enumerate(mine):
            if flags[i] == TP:
                g = gts[d.frame_id][claimed[i]]
                if bucket_of(_measure(g.box, by)) == name:
                    bflags[i] = TP
            elif flags[i] == FP and bucket_of(_measure(d.box, by)) == name:
                bflags[i] = FP
        out[name] = average_precision(scores, bflags, n_gt)
    return out


# ---- CSV / JSON interfaces --------------------------------------------------

DETECTION_COLUMNS = ["frame_id", "category", "left", "top", "right", "bottom", "score"]


class SchemaMismatch(ValueError):
    pass


def read_detections_csv(text: str) -> list[Detection]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        return []
    missing = [c for c in DETECTION_COLUMNS if c not in reader.fieldnames]
    if missing:
        raise SchemaMismatch(f"detections CSV missing columns: {missing}")
    out = []
    for n, row in enumerate(reader, start=2):
        try:
            box = BoundingBox(float(row["left"]), float(row["top"]), float(row["right"]), float(row["bottom"]))
            out.append(Detection(row["frame_id"], row["category"], box, float(row["score"])))
        except (TypeError, ValueError) as exc:
            raise SchemaMismatch(f"detections CSV line {n}: {exc}") from None
    return out


def write_detections_csv(dets: Sequence[Detection]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DETECTION_COLUMNS)
    for d in dets:
        b = d.box
        w.writerow([d.frame_id, d.category, repr(b.left), repr(b.top), repr(b.right), repr(b.bottom), repr(d.score)])
    return buf.getvalue()
