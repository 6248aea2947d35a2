"""Seeded label-noise injection with an exact ledger of every corruption.

Every frame draws from its own generator seeded by ``(seed, frame_id, kind)``,
so the output never depends on frame order or on how work is split up.
DontCare annotations are never corrupted, removed or used as categories.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from noisydet.geometry import BoundingBox
from noisydet.label_io import Annotation, Dataset, Frame, parse_label_line, serialize_annotation

MIN_SPURIOUS_SIDE = 4.0
_MAX_RESAMPLE = 1000


class NoiseKind(str, enum.Enum):
    WHOLE_IMAGE_PAIR = "whole_image_pair"
    BOX_JITTER = "box_jitter"
    SPURIOUS = "spurious"
    MISSING = "missing"
    COMBINED = "combined"
    # reserved for the ledger format; no injector
    SYMMETRY = "symmetry"
    SYSTEMATIC = "systematic"


class NoiseError(ValueError):
    pass


class SingleCategoryDataset(NoiseError):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    kind: NoiseKind
    probability: float
    jitter_shift_sigma: float = 0.1
    jitter_scale_sigma: float = 0.2
    seed: int = 0
    spurious_count: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if not 0.0 <= self.probability <= 1.0:
            raise NoiseError(f"probability must lie in [0, 1], got {self.probability}")
        if self.jitter_shift_sigma < 0 or self.jitter_scale_sigma < 0:
            raise NoiseError("jitter sigmas must be non-negative")
        if self.spurious_count < 1:
            raise NoiseError("spurious_count must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        known = {"kind", "probability", "jitter_shift_sigma", "jitter_scale_sigma", "seed", "spurious_count"}
        unknown = set(d) - known
        if unknown:
            raise NoiseError(f"unknown noise spec keys: {sorted(unknown)}")
        for key in ("kind", "probability"):
            if key not in d:
                raise NoiseError(f"missing noise spec key: {key}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "NoiseSpec":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class LedgerEntry:
    """One corruption. ``index`` is the annotation position in the frame at
    the moment the entry is applied (entries replay in order)."""

    frame_id: str
    kind: NoiseKind
    index: int
    original: Annotation | None
    corrupted: Annotation | None


@dataclass(frozen=True)
class CorruptionLedger:
    entries: tuple[LedgerEntry, ...] = ()

    def __post_init__(self):
        for e in self.entries:
            if e.original is None and e.kind is not NoiseKind.SPURIOUS:
                raise NoiseError("only spurious entries may add an annotation")
            if e.corrupted is None and e.kind is not NoiseKind.MISSING:
                raise NoiseError("only missing entries may remove an annotation")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def by_kind(self, kind: NoiseKind) -> list[LedgerEntry]:
        return [e for e in self.entries if e.kind is NoiseKind(kind)]

    def frames(self) -> set[str]:
        return {e.frame_id for e in self.entries}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LEDGER_COLUMNS)
        for e in self.entries:
            w.writerow([e.frame_id, e.kind.value, e.index, *_ann_fields(e.original), *_ann_fields(e.corrupted)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CorruptionLedger":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != LEDGER_COLUMNS:
            raise NoiseError("ledger CSV header mismatch")
        n = len(_ANN_FIELDS)
        entries = []
        for row in rows[1:]:
            orig, corr = row[3 : 3 + n], row[3 + n : 3 + 2 * n]
            entries.append(LedgerEntry(row[0], NoiseKind(row[1]), int(row[2]), _ann_from_fields(orig), _ann_from_fields(corr)))
        return cls(tuple(entries))


_ANN_FIELDS = [
    "category", "truncated", "occluded", "alpha", "left", "top", "right", "bottom",
    "height3d", "width3d", "length3d", "x3d", "y3d", "z3d", "rotation_y", "score",
]
LEDGER_COLUMNS = (
    ["frame_id", "kind", "index"]
    + [f"original_{f}" for f in _ANN_FIELDS]
    + [f"corrupted_{f}" for f in _ANN_FIELDS]
)


def _ann_fields(a: Annotation | None) -> list[str]:
    # exact reprs rather than the 6-decimal label text, so replay is lossless
    if a is None:
        return [""] * len(_ANN_FIELDS)
    b = a.box
    nums = (a.truncated, a.occluded, a.alpha, b.left, b.top, b.right, b.bottom, *a.dims3d, *a.location3d, a.rotation_y)
    parts = [a.category] + [repr(float(v)) if i != 1 else str(int(v)) for i, v in enumerate(nums)]
    return parts + ["" if a.score is None else repr(float(a.score))]


def _ann_from_fields(fields: Sequence[str]) -> Annotation | None:
    if not fields[0]:
        return None
    return parse_label_line(" ".join(f for f in fields if f != ""))


def frame_rng(seed: int, frame_id: str, kind: NoiseKind | str) -> np.random.Generator:
    kind = NoiseKind(kind).value
    digest = hashlib.blake2b(f"{int(seed)}\x1f{frame_id}\x1f{kind}".encode(), digest_size=16).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def _require_kind(spec: NoiseSpec, kind: NoiseKind) -> None:
    if spec.kind is not kind:
        raise NoiseError(f"expected a {kind.value} spec, got {spec.kind.value}")


def _rebuild(d: Dataset, frames: list[Frame]) -> Dataset:
    return Dataset(tuple(frames), d.category_set)


# ---- per-frame passes -------------------------------------------------------


def _pair_frame(frame: Frame, spec: NoiseSpec, cats: tuple[str, ...]):
    rng = frame_rng(spec.seed, frame.frame_id, NoiseKind.WHOLE_IMAGE_PAIR)
    if not rng.random() < spec.probability:
        return frame, []
    nxt = {c: cats[(i + 1) % len(cats)] for i, c in enumerate(cats)}
    anns, entries = list(frame.annotations), []
    for i, a in enumerate(anns):
        if a.is_dont_care:
            continue
        b = replace(a, category=nxt[a.category])
        anns[i] = b
        entries.append(LedgerEntry(frame.frame_id, NoiseKind.WHOLE_IMAGE_PAIR, i, a, b))
    return replace(frame, annotations=tuple(anns)), entries


def _jitter_box(box: BoundingBox, rng, shift_sigma, scale_sigma, image_size) -> BoundingBox:
    w, h = box.width, box.height
    cx, cy = box.center
    W, H = image_size
    for _ in range(_MAX_RESAMPLE):
        dx, dy, sw, sh = rng.standard_normal(4)
        if shift_sigma == 0 and scale_sigma == 0:
            # centre/size round trip is not exact in floating point
            return box.clamp(W, H) or box
        out = BoundingBox.from_center(
            cx + dx * shift_sigma * w,
            cy + dy * shift_sigma * h,
            w * math.exp(sw * scale_sigma),
            h * math.exp(sh * scale_sigma),
        ).clamp(W, H)
        if out is not None:
            return out
    return box


def _jitter_frame(frame: Frame, spec: NoiseSpec, n_eligible: int | None = None):
    rng = frame_rng(spec.seed, frame.frame_id, NoiseKind.BOX_JITTER)
    anns, entries = list(frame.annotations), []
    limit = len(anns) if n_eligible is None else n_eligible
    for i in range(limit):
        a = anns[i]
        if a.is_dont_care:
            continue
        if not rng.random() < spec.probability:
            continue
        box = _jitter_box(a.box, rng, spec.jitter_shift_sigma, spec.jitter_scale_sigma, frame.image_size)
        b = a.with_box(box)
        anns[i] = b
        entries.append(LedgerEntry(frame.frame_id, NoiseKind.BOX_JITTER, i, a, b))
    return replace(frame, annotations=tuple(anns)), entries


def _random_box(rng, image_size) -> BoundingBox:
    W, H = image_size
    if W < MIN_SPURIOUS_SIDE or H < MIN_SPURIOUS_SIDE:
        raise NoiseError(f"image {image_size} too small for a spurious box")
    while True:
        x = np.sort(rng.uniform(0.0, W, 2))
        y = np.sort(rng.uniform(0.0, H, 2))
        if x[1] - x[0] >= MIN_SPURIOUS_SIDE and y[1] - y[0] >= MIN_SPURIOUS_SIDE:
            return BoundingBox(float(x[0]), float(y[0]), float(x[1]), float(y[1]))


def _spurious_frame(frame: Frame, spec: NoiseSpec, cats: tuple[str, ...]):
    rng = frame_rng(spec.seed, frame.frame_id, NoiseKind.SPURIOUS)
    if not rng.random() < spec.probability:
        return frame, []
    anns, entries = list(frame.annotations), []
    for _ in range(spec.spurious_count):
        box = _random_box(rng, frame.image_size)
        cat = cats[int(rng.integers(len(cats)))]
        b = Annotation(category=cat, box=box)
        entries.append(LedgerEntry(frame.frame_id, NoiseKind.SPURIOUS, len(anns), None, b))
        anns.append(b)
    return replace(frame, annotations=tuple(anns)), entries


def _missing_frame(frame: Frame, spec: NoiseSpec, n_eligible: int | None = None):
    rng = frame_rng(spec.seed, frame.frame_id, NoiseKind.MISSING)
    limit = len(frame.annotations) if n_eligible is None else n_eligible
    kept, entries = [], []
    for i, a in enumerate(frame.annotations):
        if i < limit and not a.is_dont_care and rng.random() < spec.probability:
            entries.append(LedgerEntry(frame.frame_id, NoiseKind.MISSING, len(kept), a, None))
            continue
        kept.append(a)
    return replace(frame, annotations=tuple(kept)), entries


# ---- public injectors -------------------------------------------------------


def _run(d: Dataset, fn) -> tuple[Dataset, CorruptionLedger]:
    frames, entries = [], []
    for f in d.frames:
        g, e = fn(f)
        frames.append(g)
        entries.extend(e)
    return _rebuild(d, frames), CorruptionLedger(tuple(entries))


def inject_whole_image_pair_noise(d: Dataset, spec: NoiseSpec) -> tuple[Dataset, CorruptionLedger]:
    """With probability p per frame, move every label to the next category."""
    _require_kind(spec, NoiseKind.WHOLE_IMAGE_PAIR)
    if len(d.category_set) < 2:
        raise SingleCategoryDataset("pair noise needs at least two categories")
    return _run(d, lambda f: _pair_frame(f, spec, d.category_set))


def inject_box_jitter(d: Dataset, spec: NoiseSpec) -> tuple[Dataset, CorruptionLedger]:
    """With probability p per box, shift the centre by N(0, (sigma*size)^2) and
    scale each side by a log-normal factor. Clamped to the image; draws that
    clamp to a degenerate box are redrawn."""
    _require_kind(spec, NoiseKind.BOX_JITTER)
    return _run(d, lambda f: _jitter_frame(f, spec))


def inject_spurious_boxes(d: Dataset, spec: NoiseSpec) -> tuple[Dataset, CorruptionLedger]:
    _require_kind(spec, NoiseKind.SPURIOUS)
    return _run(d, lambda f: _spurious_frame(f, spec, d.category_set))


def inject_missing_boxes(d: Dataset, spec: NoiseSpec) -> tuple[Dataset, CorruptionLedger]:
    _require_kind(spec, NoiseKind.MISSING)
    return _run(d, lambda f: _missing_frame(f, spec))


def inject_combined(d: Dataset, spec: NoiseSpec) -> tuple[Dataset, CorruptionLedger]:
    """Jitter, then spurious boxes, then missing boxes, each with probability p.

    Spurious boxes are appended after the original labels and are exempt
    from the missing pass.
    """
    _require_kind(spec, NoiseKind.COMBINED)

    def one(f: Frame):
        n_orig = len(f.annotations)
        f, e1 = _jitter_frame(f, spec)
        f, e2 = _spurious_frame(f, spec, d.category_set)
        f, e3 = _missing_frame(f, spec, n_eligible=n_orig)
        return f, e1 + e2 + e3

    return _run(d, one)


INJECTORS = {
    NoiseKind.WHOLE_IMAGE_PAIR: inject_whole_image_pair_noise,
    NoiseKind.BOX_JITTER: inject_box_jitter,
    NoiseKind.SPURIOUS: inject_spurious_boxes,
    NoiseKind.MISSING: inject_missing_boxes,
    NoiseKind.COMBINED: inject_combined,
}


def inject(d: Dataset, spec: NoiseSpec) -> tuple[Dataset, CorruptionLedger]:
    try:
        fn = INJECTORS[spec.kind]
    except KeyError:
        raise NoiseError(f"no injector for noise kind {spec.kind.value}") from None
    return fn(d, spec)


def _replay_frame(frame: Frame, entries: Sequence[LedgerEntry]) -> tuple[Frame, list[bool]]:
    anns = list(frame.annotations)
    flags = [False] * len(anns)
    for e in entries:
        if e.corrupted is None:
            if anns[e.index] != e.original:
                raise NoiseError(f"ledger does not match frame {frame.frame_id} at {e.index}")
            del anns[e.index]
            del flags[e.index]
        elif e.original is None:
            anns.insert(e.index, e.corrupted)
            flags.insert(e.index, True)
        else:
            if anns[e.index] != e.original:
                raise NoiseError(f"ledger does not match frame {frame.frame_id} at {e.index}")
            anns[e.index] = e.corrupted
            flags[e.index] = True
    return replace(frame, annotations=tuple(anns)), flags


def _group(ledger: CorruptionLedger) -> dict[str, list[LedgerEntry]]:
    by_frame: dict[str, list[LedgerEntry]] = {}
    for e in ledger:
        by_frame.setdefault(e.frame_id, []).append(e)
    return by_frame


def replay_ledger(d: Dataset, ledger: CorruptionLedger) -> Dataset:
    """Apply the ledger to the clean dataset; reproduces the injector output."""
    by_frame = _group(ledger)
    frames = [_replay_frame(f, by_frame.get(f.frame_id, ()))[0] for f in d.frames]
    return _rebuild(d, frames)


def corruption_flags(d: Dataset, ledger: CorruptionLedger) -> dict[str, list[bool]]:
    """Per frame, one flag per output annotation: True if altered or added."""
    by_frame = _group(ledger)
    return {f.frame_id: _replay_frame(f, by_frame.get(f.frame_id, ()))[1] for f in d.frames}
