"""Dual-network training on toy scenes with optional co-teaching selection.

Both networks see identical batches in identical order; they differ only in
initialisation seed. Each network's update keeps the records its peer
ranked as low loss. The candidate records are always the updating
network's own (its positives and its mined hard negatives); the peer
re-scores exactly those records, so with every keep fraction at 1 the
three modes run the same arithmetic.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from noisydet.coteach import (
    ScheduleParams,
    SelectionMask,
    SelectionMode,
    cross_select,
    keep_fractions,
)
from noisydet.evalkit import Detection, evaluate
from noisydet.geometry import BoundingBox, decode_boxes, nms
from noisydet.label_io import Dataset
from noisydet.multibox_loss import Component, LossBreakdown, frame_breakdown, revalue, targets_for_annotations
from noisydet.noise_forge import NoiseKind, NoiseSpec, corruption_flags, inject
from noisydet.toy_world.model import BatchTargets, ToyModel, adam_step, backward, forward, init_model
from noisydet.toy_world.scene import SceneConfig, anchor_grid, cell_inputs, generate_split


class DivergenceDetected(RuntimeError):
    def __init__(self, message: str, history: "RunHistory"):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    learning_rate: float = 2e-3
    hidden: int = 32
    dtype: str = "float32"
    schedule: ScheduleParams = field(default_factory=lambda: ScheduleParams(epoch_constant=10))
    mode: SelectionMode = SelectionMode.NONE
    net_seeds: tuple[int, int] = (1, 2)
    data_seed: int = 0
    n_train: int = 1024
    n_val: int = 64
    n_test: int = 128
    neg_ratio: float = 3.0
    box_weight: float = 1.0
    pos_threshold: float = 0.5
    eval_every: int = 10
    score_threshold: float = 0.05
    nms_iou: float = 0.45
    max_detections: int = 100

    def __post_init__(self):
        object.__setattr__(self, "mode", SelectionMode(self.mode))
        object.__setattr__(self, "net_seeds", tuple(int(s) for s in self.net_seeds))
        if isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", ScheduleParams(**self.schedule))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if len(self.net_seeds) != 2:
            raise ValueError("net_seeds must hold two seeds")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["net_seeds"] = list(self.net_seeds)
        return d


HISTORY_COLUMNS = [
    "epoch", "net",
    "loss_pos_ce", "loss_neg_ce", "loss_box", "loss_total",
    "keep_image", "keep_pos_ce", "keep_neg_ce", "keep_box",
    "pos_records", "pos_corrupted", "pos_excluded", "pos_excluded_corrupted",
    "base_corruption_rate", "selection_precision", "selection_lift",
    "val_ap", "test_ap",
]


@dataclass
class RunHistory:
    rows: list[dict] = field(default_factory=list)
    models: tuple[ToyModel, ToyModel] | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in self.rows:
            w.writerow([_fmt(row.get(c)) for c in HISTORY_COLUMNS])
        return buf.getvalue()

    def for_net(self, net: int) -> list[dict]:
        return [r for r in self.rows if r["net"] == net]

    def final(self, key: str, net: int = 1):
        for r in reversed(self.for_net(net)):
            if r.get(key) is not None and not (isinstance(r[key], float) and math.isnan(r[key])):
                return r[key]
        return None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class _Split:
    inputs: np.ndarray  # (n, n_cells, input_dim)
    clean: Dataset
    frame_ids: list[str]


def _make_split(cfg: SceneConfig, start: int, count: int) -> _Split:
    feats, ds = generate_split(cfg, start, count)
    return _Split(cell_inputs(feats, cfg.context), ds, [f.frame_id for f in ds.frames])


def detect(model: ToyModel, inputs: np.ndarray, frame_ids: list[str], cfg: SceneConfig, train: TrainConfig) -> list[Detection]:
    """Decode per-class detections with greedy NMS."""
    grid = anchor_grid(cfg)
    logits, offsets, _ = forward(model, inputs)
    z = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=-1, keepdims=True)
    cats = cfg.category_set
    out: list[Detection] = []
    for b, fid in enumerate(frame_ids):
        boxes = decode_boxes(offsets[b], grid.boxes)
        for k, cat in enumerate(cats, start=1):
            s = probs[b, :, k]
            cand = np.flatnonzero(s > train.score_threshold)
            if cand.size == 0:
                continue
            if cand.size > 2 * train.max_detections:
                cand = cand[np.argsort(-s[cand], kind="stable")[: 2 * train.max_detections]]
            keep = nms(boxes[cand], s[cand], train.nms_iou, train.max_detections)
            for i in cand[keep]:
                l, t, r, btm = boxes[i]
                if r > l and btm > t:
                    out.append(Detection(fid, cat, BoundingBox(float(l), float(t), float(r), float(btm)), float(s[i])))
    return out


def evaluate_model(model: ToyModel, split: _Split, cfg: SceneConfig, train: TrainConfig) -> float:
    dets = detect(model, split.inputs, split.frame_ids, cfg, train)
    gts = {f.frame_id: f.annotations for f in split.clean.frames}
    return evaluate(dets, gts, cfg.category_set).mean_ap


@dataclass
class _EpochStats:
    loss: np.ndarray = field(default_factory=lambda: np.zeros(3))
    frames: int = 0
    pos_records: int = 0
    pos_corrupted: int = 0
    pos_excluded: int = 0
    pos_excluded_corrupted: int = 0


def _accumulate(stats: _EpochStats, b: LossBreakdown, flags: np.ndarray, corrupt: dict[str, np.ndarray]) -> None:
    norm = b.normalizers()
    for c in Component:
        sel = b.components == int(c)
        stats.loss[int(c)] += float((b.values[sel] / norm[sel]).sum())
    stats.frames += len(b.positives)
    pos = np.flatnonzero(b.components == int(Component.POS_CE))
    if pos.size == 0:
        return
    bad = np.array([corrupt[str(f)][g] for f, g in zip(b.frame_ids[pos], b.gt_index[pos])], dtype=bool)
    excl = ~flags[pos]
    stats.pos_records += pos.size
    stats.pos_corrupted += int(bad.sum())
    stats.pos_excluded += int(excl.sum())
    stats.pos_excluded_corrupted += int((bad & excl).sum())


def _stats_row(epoch: int, net: int, s: _EpochStats, R: dict) -> dict:
    n = max(1, s.frames)
    base = s.pos_corrupted / s.pos_records if s.pos_records else float("nan")
    prec = s.pos_excluded_corrupted / s.pos_excluded if s.pos_excluded else float("nan")
    lift = prec / base if s.pos_excluded and base > 0 else float("nan")
    return {
        "epoch": epoch,
        "net": net,
        "loss_pos_ce": s.loss[0] / n,
        "loss_neg_ce": s.loss[1] / n,
        "loss_box": s.loss[2] / n,
        "loss_total": float(s.loss.sum()) / n,
        "keep_image": R[None],
        "keep_pos_ce": R[Component.POS_CE],
        "keep_neg_ce": R[Component.NEG_CE],
        "keep_box": R[Component.BOX],
        "pos_records": s.pos_records,
        "pos_corrupted": s.pos_corrupted,
        "pos_excluded": s.pos_excluded,
        "pos_excluded_corrupted": s.pos_excluded_corrupted,
        "base_corruption_rate": base,
        "selection_precision": prec,
        "selection_lift": lift,
        "val_ap": None,
        "test_ap": None,
    }


def prepare_training_labels(cfg: SceneConfig, clean: Dataset, noise: NoiseSpec | None):
    """Corrupt the clean training labels; returns (noisy dataset, per-annotation corruption flags)."""
    if noise is None or noise.probability == 0.0:
        return clean, {f.frame_id: np.zeros(len(f.annotations), dtype=bool) for f in clean.frames}
    noisy, ledger = inject(clean, noise)
    flags = corruption_flags(clean, ledger)
    return noisy, {k: np.asarray(v, dtype=bool) for k, v in flags.items()}


def train_coteach(cfg: SceneConfig, noise: NoiseSpec | None, train: TrainConfig, progress=None) -> RunHistory:
    """Train two networks; per-epoch metrics for each land in the history.

    ``progress`` is an optional callable receiving each finished row.
    """
    grid = anchor_grid(cfg)
    tr = _make_split(cfg, 0, train.n_train)
    va = _make_split(cfg, train.n_train, train.n_val)
    te = _make_split(cfg, train.n_train + train.n_val, train.n_test)
    for sp in (tr, va, te):
        sp.inputs = sp.inputs.astype(train.dtype, copy=False)

    noisy, corrupt = prepare_training_labels(cfg, tr.clean, noise)
    targets = [
        targets_for_annotations(f.frame_id, grid, f.annotations, cfg.category_set, train.pos_threshold)
        for f in noisy.frames
    ]
    classes_all = np.stack([t.classes for t in targets])
    boxes_all = np.stack([t.box_targets for t in targets])
    by_id = {t.frame_id: t for t in targets}

    A = len(cfg.anchor_cells)
    models = [init_model(cfg.input_dim, train.hidden, A, cfg.categories + 1, s, np.dtype(train.dtype)) for s in train.net_seeds]
    history = RunHistory()
    data_rng = np.random.default_rng([train.data_seed, 0xDA7A])
    mode = train.mode

    for epoch in range(train.epochs):
        R = keep_fractions(epoch, train.schedule)
        order = data_rng.permutation(train.n_train)
        stats = [_EpochStats(), _EpochStats()]
        for start in range(0, train.n_train, train.batch_size):
            idx = np.sort(order[start : start + train.batch_size])
            fids = [tr.frame_ids[i] for i in idx]
            x = tr.inputs[idx]
            bt = BatchTargets(fids, classes_all[idx], boxes_all[idx])
            fwd = [forward(m, x) for m in models]
            preds = [f[:2] for f in fwd]
            bds = [
                LossBreakdown.concat([
                    frame_breakdown(lg[j], of[j], by_id[f], train.neg_ratio, train.box_weight)
                    for j, f in enumerate(fids)
                ])
                for lg, of in preds
            ]
            if mode is SelectionMode.NONE:
                masks = [SelectionMask.full(bds[0]), SelectionMask.full(bds[1])]
            else:
                per_frame = [
                    ({f: lg[j] for j, f in enumerate(fids)}, {f: of[j] for j, f in enumerate(fids)})
                    for lg, of in preds
                ]
                peer_on_1 = revalue(bds[0], *per_frame[1], by_id, train.box_weight)
                peer_on_2 = revalue(bds[1], *per_frame[0], by_id, train.box_weight)
                masks = [
                    cross_select(bds[0], peer_on_1, mode, R)[0],
                    cross_select(peer_on_2, bds[1], mode, R)[1],
                ]
            for k in range(2):
                flags = masks[k].flags
                _accumulate(stats[k], bds[k], flags, corrupt)
                _, grad = backward(models[k], x, bt, bds[k], flags, train.box_weight, forward_out=fwd[k])
                adam_step(models[k], grad, train.learning_rate)
                if not np.isfinite(models[k].params).all():
                    history.models = tuple(models)
                    raise DivergenceDetected(f"net {k + 1} diverged at epoch {epoch}", history)

        last = epoch == train.epochs - 1
        do_eval = last or (train.eval_every > 0 and (epoch + 1) % train.eval_every == 0)
        for k in range(2):
            row = _stats_row(epoch, k + 1, stats[k], R)
            if do_eval:
                row["val_ap"] = evaluate_model(models[k], va, cfg, train)
                row["test_ap"] = evaluate_model(models[k], te, cfg, train)
            history.rows.append(row)
            if progress is not None:
                progress(row)
    history.models = tuple(models)
    return history


REFERENCE_SCHEDULE = ScheduleParams(tau=0.5, tau_pos=0.3, tau_neg=0.3, tau_box=0.5, epoch_constant=6)
REFERENCE_SEED_PAIRS = ((1, 2), (3, 4), (5, 6))


def reference_configs(p: float = 0.5, seed: int = 0, mode: SelectionMode | str = SelectionMode.NONE,
                      net_seeds: tuple[int, int] = (1, 2), epochs: int = 25):
    """The toy reference setup: combined noise at probability ``p`` and a
    training config that evaluates only after the final epoch."""
    scene = SceneConfig()
    noise = NoiseSpec(NoiseKind.COMBINED, p, seed=seed)
    train = TrainConfig(epochs=epochs, mode=mode, schedule=REFERENCE_SCHEDULE, net_seeds=net_seeds,
                        eval_every=epochs)
    return scene, noise, train
