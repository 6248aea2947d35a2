import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from noisydet.geometry import BoundingBox
from noisydet.label_io import DONT_CARE, Annotation, Dataset, Frame
from noisydet.noise_forge import (
    MIN_SPURIOUS_SIDE,
    CorruptionLedger,
    LedgerEntry,
    NoiseError,
    NoiseKind,
    NoiseSpec,
    SingleCategoryDataset,
    corruption_flags,
    frame_rng,
    inject,
    inject_box_jitter,
    inject_whole_image_pair_noise,
    replay_ledger,
)

from helpers import make_dataset

INJECTABLE = [NoiseKind.WHOLE_IMAGE_PAIR, NoiseKind.BOX_JITTER, NoiseKind.SPURIOUS, NoiseKind.MISSING, NoiseKind.COMBINED]


def _dataset(n=50, per_frame=3, seed=0):
    rng = np.random.default_rng(seed)
    frames = []
    for _ in range(n):
        boxes = []
        for _ in range(int(rng.integers(0, per_frame + 1))):
            l, t = rng.uniform(0, 1000), rng.uniform(0, 300)
            boxes.append((str(rng.choice(["Car", "Van", "Truck"])), l, t, l + rng.uniform(5, 200), t + rng.uniform(5, 70)))
        frames.append(boxes)
    return make_dataset(frames, ("Car", "Van", "Truck"))


def test_pair_noise_p1_swaps_two_categories():
    d = make_dataset([[("Car", 0, 0, 10, 10), ("Van", 5, 5, 20, 20)]])
    out, ledger = inject(d, NoiseSpec(NoiseKind.WHOLE_IMAGE_PAIR, 1.0))
    assert [a.category for a in out.frames[0].annotations] == ["Van", "Car"]
    assert [a.box for a in out.frames[0].annotations] == [a.box for a in d.frames[0].annotations]
    assert len(ledger) == 2


def test_pair_noise_cycles_in_category_order():
    d = make_dataset([[("Car", 0, 0, 10, 10), ("Van", 5, 5, 20, 20), ("Truck", 1, 1, 3, 3)]], ("Car", "Van", "Truck"))
    out, _ = inject(d, NoiseSpec(NoiseKind.WHOLE_IMAGE_PAIR, 1.0))
    assert [a.category for a in out.frames[0].annotations] == ["Van", "Truck", "Car"]


def test_pair_noise_single_category():
    d = make_dataset([[("Car", 0, 0, 10, 10)]], ("Car",))
    with pytest.raises(SingleCategoryDataset):
        inject_whole_image_pair_noise(d, NoiseSpec(NoiseKind.WHOLE_IMAGE_PAIR, 0.5))


def test_wrong_kind_rejected():
    with pytest.raises(NoiseError):
        inject_box_jitter(_dataset(2), NoiseSpec(NoiseKind.MISSING, 0.5))


def test_zero_sigma_jitter_is_identity_but_logged():
    d = _dataset(30)
    out, ledger = inject(d, NoiseSpec(NoiseKind.BOX_JITTER, 1.0, jitter_shift_sigma=0, jitter_scale_sigma=0))
    assert out.frames == d.frames
    assert len(ledger) == d.n_annotations


def test_jitter_shift_statistics():
    n = 10_000
    d = make_dataset([[("Car", 500, 100, 600, 200)] for _ in range(n)])
    spec = NoiseSpec(NoiseKind.BOX_JITTER, 1.0, jitter_shift_sigma=0.1, jitter_scale_sigma=0.0, seed=4)
    out, _ = inject(d, spec)
    dx = np.array([f.annotations[0].box.center[0] - 550 for f in out.frames]) / 100
    assert abs(dx.std() - 0.1) / 0.1 < 0.05
    assert abs(dx.mean()) < 0.005


def test_jitter_scale_is_log_normal():
    n = 5000
    d = make_dataset([[("Car", 500, 100, 600, 200)] for _ in range(n)])
    out, _ = inject(d, NoiseSpec(NoiseKind.BOX_JITTER, 1.0, jitter_shift_sigma=0.0, jitter_scale_sigma=0.2, seed=1))
    logw = np.log([f.annotations[0].box.width / 100 for f in out.frames])
    assert abs(logw.std() - 0.2) < 0.01


def test_spurious_p1_adds_one_box_per_frame():
    d = _dataset(200)
    out, ledger = inject(d, NoiseSpec(NoiseKind.SPURIOUS, 1.0, seed=3))
    assert out.n_annotations == d.n_annotations + 200
    for e in ledger:
        assert e.original is None
        b = e.corrupted.box
        assert b.width >= MIN_SPURIOUS_SIDE and b.height >= MIN_SPURIOUS_SIDE
        assert 0 <= b.left and b.right <= 1242 and 0 <= b.top and b.bottom <= 375
        assert e.corrupted.category in d.category_set


def test_spurious_repeat_count():
    d = _dataset(20)
    out, _ = inject(d, NoiseSpec(NoiseKind.SPURIOUS, 1.0, spurious_count=3))
    assert out.n_annotations == d.n_annotations + 60


def test_missing_p1_empties_frames():
    out, ledger = inject(_dataset(40), NoiseSpec(NoiseKind.MISSING, 1.0))
    assert all(len(f.annotations) == 0 for f in out.frames)
    assert all(e.corrupted is None for e in ledger)


def test_dont_care_never_corrupted():
    frames = [Frame("a", (100.0, 100.0), (Annotation(DONT_CARE, BoundingBox(1, 1, 20, 20)), Annotation("Car", BoundingBox(30, 30, 60, 60))))]
    d = Dataset(tuple(frames), ("Car", "Van"))
    for kind in (NoiseKind.WHOLE_IMAGE_PAIR, NoiseKind.BOX_JITTER, NoiseKind.MISSING):
        out, ledger = inject(d, NoiseSpec(kind, 1.0))
        assert out.frames[0].annotations[0] == frames[0].annotations[0]
        assert all(e.original is None or not e.original.is_dont_care for e in ledger)


def test_combined_spurious_exempt_from_missing():
    d = _dataset(300)
    out, ledger = inject(d, NoiseSpec(NoiseKind.COMBINED, 1.0, seed=8))
    # everything original is removed, every spurious box survives
    assert out.n_annotations == 300
    assert len(ledger.by_kind(NoiseKind.SPURIOUS)) == 300
    kinds = [e.kind for e in ledger if e.frame_id == d.frames[0].frame_id]
    order = {NoiseKind.BOX_JITTER: 0, NoiseKind.SPURIOUS: 1, NoiseKind.MISSING: 2}
    assert [order[k] for k in kinds] == sorted(order[k] for k in kinds)


@pytest.mark.parametrize("kind", INJECTABLE)
@pytest.mark.parametrize("p", [0.0, 0.3, 1.0])
def test_replay_reconstructs_output(kind, p):
    d = _dataset(60, seed=2)
    out, ledger = inject(d, NoiseSpec(kind, p, seed=5))
    assert replay_ledger(d, ledger).frames == out.frames
    flags = corruption_flags(d, ledger)
    for f in out.frames:
        assert len(flags[f.frame_id]) == len(f.annotations)
    again = CorruptionLedger.from_csv(ledger.to_csv())
    assert replay_ledger(d, again).frames == out.frames


@pytest.mark.parametrize("kind", INJECTABLE)
def test_frame_independence(kind):
    d = _dataset(40, seed=3)
    sub = Dataset(d.frames[10:20], d.category_set)
    full, _ = inject(d, NoiseSpec(kind, 0.5, seed=6))
    part, _ = inject(sub, NoiseSpec(kind, 0.5, seed=6))
    assert full.frames[10:20] == part.frames


def test_frame_rng_depends_on_all_inputs():
    a = frame_rng(1, "x", NoiseKind.MISSING).random()
    assert a == frame_rng(1, "x", "missing").random()
    assert a != frame_rng(2, "x", NoiseKind.MISSING).random()
    assert a != frame_rng(1, "y", NoiseKind.MISSING).random()
    assert a != frame_rng(1, "x", NoiseKind.SPURIOUS).random()


def test_ledger_invariants():
    a = Annotation("Car", BoundingBox(0, 0, 1, 1))
    with pytest.raises(NoiseError):
        CorruptionLedger((LedgerEntry("f", NoiseKind.MISSING, 0, None, a),))
    with pytest.raises(NoiseError):
        CorruptionLedger((LedgerEntry("f", NoiseKind.BOX_JITTER, 0, a, None),))


def test_spec_json_round_trip_and_validation():
    s = NoiseSpec(NoiseKind.COMBINED, 0.25, 0.05, 0.1, seed=2**63 - 1)
    assert NoiseSpec.from_json(s.to_json()) == s
    assert set(json.loads(s.to_json())) >= {"kind", "probability", "jitter_shift_sigma", "jitter_scale_sigma", "seed"}
    with pytest.raises(NoiseError):
        NoiseSpec.from_dict({"kind": "missing", "probability": 0.1, "colour": 1})
    with pytest.raises(NoiseError):
        NoiseSpec.from_dict({"kind": "missing"})
    with pytest.raises(NoiseError):
        NoiseSpec(NoiseKind.MISSING, 1.5)
    with pytest.raises(NoiseError):
        NoiseSpec(NoiseKind.BOX_JITTER, 0.5, jitter_shift_sigma=-1)


def test_reserved_kinds_have_no_injector():
    with pytest.raises(NoiseError):
        inject(_dataset(2), NoiseSpec(NoiseKind.SYMMETRY, 0.5))


@given(st.sampled_from(INJECTABLE), st.floats(0, 1), st.integers(0, 2**32))
def test_emitted_boxes_valid(kind, p, seed):
    d = _dataset(8, seed=seed % 7)
    out, _ = inject(d, NoiseSpec(kind, p, seed=seed))
    for f in out.frames:
        for a in f.annotations:
            b = a.box
            assert b.left < b.right and b.top < b.bottom
            assert 0 <= b.left and b.right <= f.image_size[0] and 0 <= b.top and b.bottom <= f.image_size[1]
