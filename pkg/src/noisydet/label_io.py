"""KITTI label files: parsing, serialization and dataset loading.

One object per line, 15 whitespace-separated fields plus an optional score::

    type truncated occluded alpha left top right bottom h w l x y z rotation_y [score]

One file per frame, named ``<frame_id>.txt``.
"""

from __future__ import annotations

import logging
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from noisydet.geometry import BoundingBox, InvalidBox

log = logging.getLogger(__name__)

DONT_CARE = "DontCare"
KITTI_IMAGE_SIZE = (1242, 375)
KITTI_CATEGORIES = ("Car", "Van", "Truck", "Pedestrian", "Person_sitting", "Cyclist", "Tram", "Misc")


class LabelError(Exception):
    pass


class MalformedLine(LabelError):
    def __init__(self, message: str, path: str | os.PathLike | None = None, lineno: int | None = None):
        self.path = None if path is None else str(path)
        self.lineno = lineno
        where = ""
        if path is not None:
            where = f"{path}:{lineno}: " if lineno is not None else f"{path}: "
        super().__init__(where + message)


class UnknownCategory(MalformedLine):
    pass


class IoFailure(LabelError, OSError):
    pass


@dataclass(frozen=True)
class Annotation:
    category: str
    box: BoundingBox
    truncated: float = 0.0
    occluded: int = 0
    alpha: float = -10.0
    dims3d: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    location3d: tuple[float, float, float] = (-1000.0, -1000.0, -1000.0)
    rotation_y: float = -10.0
    score: float | None = None

    def __post_init__(self):
        if not self.category or any(ch.isspace() for ch in self.category):
            raise MalformedLine(f"category must be a non-empty token, got {self.category!r}")

    @property
    def is_dont_care(self) -> bool:
        return self.category == DONT_CARE

    def with_box(self, box: BoundingBox) -> "Annotation":
        return replace(self, box=box)


@dataclass(frozen=True)
class Frame:
    frame_id: str
    image_size: tuple[float, float]
    annotations: tuple[Annotation, ...] = ()

    @property
    def n_objects(self) -> int:
        """Annotations that are not DontCare."""
        return sum(1 for a in self.annotations if not a.is_dont_care)


@dataclass(frozen=True)
class Dataset:
    frames: tuple[Frame, ...]
    category_set: tuple[str, ...]
    _index: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        ids = [f.frame_id for f in self.frames]
        if len(set(ids)) != len(ids):
            raise LabelError("duplicate frame_id in dataset")
        cats = set(self.category_set)
        for f in self.frames:
            for a in f.annotations:
                if not a.is_dont_care and a.category not in cats:
                    raise UnknownCategory(f"category {a.category!r} not in category set", f.frame_id)
        object.__setattr__(self, "_index", {fid: i for i, fid in enumerate(ids)})

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, frame_id: str) -> Frame:
        return self.frames[self._index[frame_id]]

    def __iter__(self):
        return iter(self.frames)

    @property
    def n_annotations(self) -> int:
        return sum(len(f.annotations) for f in self.frames)


def _num(x: float) -> str:
    # repr of the 6-decimal rounding: shortest text that round-trips the value
    r = round(float(x), 6)
    if r == 0.0:
        r = 0.0  # drop negative zero
    return repr(r)


def parse_label_line(line: str) -> Annotation:
    parts = line.split()
    if len(parts) not in (15, 16):
        raise MalformedLine(f"expected 15 or 16 fields, got {len(parts)}")
    try:
        nums = [float(p) for p in parts[1:]]
    except ValueError as exc:
        raise MalformedLine(f"non-numeric field: {exc}") from None
    if not all(math.isfinite(v) for v in nums):
        raise MalformedLine("non-finite numeric field")
    occ = nums[1]
    if occ != int(occ):
        raise MalformedLine(f"occluded must be an integer code, got {parts[2]}")
    left, top, right, bottom = nums[3:7]
    if not (left < right and top < bottom):
        raise InvalidBox(f"degenerate box ({left}, {top}, {right}, {bottom})")
    return Annotation(
        category=parts[0],
        truncated=nums[0],
        occluded=int(occ),
        alpha=nums[2],
        box=BoundingBox(left, top, right, bottom),
        dims3d=tuple(nums[7:10]),
        location3d=tuple(nums[10:13]),
        rotation_y=nums[13],
        score=nums[14] if len(nums) == 15 else None,
    )


def serialize_annotation(a: Annotation) -> str:
    b = a.box
    fields = [
        a.category,
        _num(a.truncated),
        str(int(a.occluded)),
        _num(a.alpha),
        _num(b.left),
        _num(b.top),
        _num(b.right),
        _num(b.bottom),
        *(_num(v) for v in a.dims3d),
        *(_num(v) for v in a.location3d),
        _num(a.rotation_y),
    ]
    if a.score is not None:
        fields.append(_num(a.score))
    return " ".join(fields)


def clamp_annotation(a: Annotation, image_size: tuple[float, float]) -> Annotation | None:
    """Clip the box to the image; None when clipping leaves a side under 1 px."""
    b = a.box
    w, h = image_size
    if b.left >= 0 and b.top >= 0 and b.right <= w and b.bottom <= h:
        return a
    clipped = b.clamp(w, h)
    return None if clipped is None else a.with_box(clipped)


def serialize_frame(frame: Frame) -> str:
    lines = []
    for a in frame.annotations:
        c = clamp_annotation(a, frame.image_size)
        if c is None:
            log.debug("dropping degenerate box in frame %s", frame.frame_id)
            continue
        lines.append(serialize_annotation(c))
    return "".join(line + "\n" for line in lines)


def parse_label_file(
    path: str | os.PathLike,
    categories: Sequence[str] | None = None,
    strict: bool = True,
) -> list[Annotation]:
    """Parse one label file.

    In strict mode any malformed line or category outside ``categories``
    raises with file and line context. Otherwise malformed lines are skipped
    with a warning and unknown categories become DontCare.
    """
    known = None if categories is None else set(categories)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            a = parse_label_line(line)
        except (LabelError, InvalidBox) as exc:
            if strict:
                raise MalformedLine(str(exc), path, lineno) from None
            log.warning("%s:%d: skipping line (%s)", path, lineno, exc)
            continue
        if known is not None and not a.is_dont_care and a.category not in known:
            if strict:
                raise UnknownCategory(f"unknown category {a.category!r}", path, lineno)
            a = replace(a, category=DONT_CARE)
        out.append(a)
    return out


def load_dataset(
    labels_dir: str | os.PathLike,
    categories: Sequence[str] = KITTI_CATEGORIES,
    strict: bool = True,
    image_size: tuple[float, float] = KITTI_IMAGE_SIZE,
    image_sizes: Mapping[str, tuple[float, float]] | None = None,
) -> Dataset:
    """Load every ``*.txt`` in ``labels_dir`` as a frame, sorted by frame id.

    KITTI label files do not record the image size; ``image_size`` applies
    to every frame unless ``image_sizes`` overrides it per frame id. Boxes are
    clamped to the image and dropped if clamping degenerates them.
    """
    root = Path(labels_dir)
    if not root.is_dir():
        raise IoFailure(f"labels directory not found: {root}")
    frames = []
    for path in sorted(root.glob("*.txt"), key=lambda p: p.stem):
        fid = path.stem
        size = tuple(image_sizes.get(fid, image_size)) if image_sizes else tuple(image_size)
        anns = []
        for a in parse_label_file(path, categories, strict=strict):
            c = clamp_annotation(a, size)
            if c is None:
                log.warning("%s: dropping box degenerate after clamping", path)
                continue
            anns.append(c)
        frames.append(Frame(fid, size, tuple(anns)))
    return Dataset(tuple(frames), tuple(categories))


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(dataset: Dataset | Iterable[Frame], out_dir: str | os.PathLike) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for frame in dataset:
        atomic_write_text(out / f"{frame.frame_id}.txt", serialize_frame(frame))
