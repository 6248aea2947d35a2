import numpy as np
import pytest
from hypothesis import given, strategies as st

from noisydet.coteach import (
    BatchNoiseParams,
    CountMode,
    EmptyBatch,
    KeyMismatch,
    ScheduleParams,
    SelectionMask,
    SelectionMode,
    cross_select,
    expected_noisy_remaining,
    keep_fraction,
    keep_fractions,
    select,
    select_per_image,
    select_per_object,
)
from noisydet.multibox_loss import Component, LossBreakdown, LossRecord


def _frames_with_totals(totals):
    recs = [LossRecord(f"f{i}", 0, Component.NEG_CE, float(t)) for i, t in enumerate(totals)]
    return LossBreakdown.from_records(recs)


def test_schedule_examples():
    s = ScheduleParams(tau=0.5, epoch_constant=10)
    assert keep_fraction(0, s) == 1.0
    assert keep_fraction(5, s) == 0.75
    assert keep_fraction(10, s) == keep_fraction(50, s) == 0.5


def test_schedule_per_component_fallback():
    s = ScheduleParams(tau=0.4, tau_pos=0.2, epoch_constant=2)
    R = keep_fractions(2, s)
    assert R[None] == pytest.approx(0.6)
    assert R[Component.POS_CE] == pytest.approx(0.8)
    assert R[Component.NEG_CE] == R[Component.BOX] == pytest.approx(0.6)


@pytest.mark.parametrize("kw", [{"tau": 1.0}, {"tau": -0.1}, {"tau_box": 1.2}, {"epoch_constant": 0}])
def test_schedule_validation(kw):
    with pytest.raises(ValueError):
        ScheduleParams(**kw)


@given(st.floats(0, 0.99), st.integers(1, 50), st.integers(0, 200))
def test_schedule_monotone(tau, tk, e):
    s = ScheduleParams(tau=tau, epoch_constant=tk)
    assert keep_fraction(e + 1, s) <= keep_fraction(e, s)
    if e >= tk:
        assert keep_fraction(e, s) == pytest.approx(1 - tau)


def test_per_image_example():
    b = _frames_with_totals([1, 2, 3, 4])
    assert {k[0] for k in select_per_image(b, 0.5).kept} == {"f0", "f1"}
    assert len(select_per_image(b, 1.0)) == 4


def test_per_image_normalises_by_positives():
    recs = [LossRecord("a", 0, Component.POS_CE, 3.0, 0), LossRecord("a", 1, Component.POS_CE, 3.0, 1),
            LossRecord("b", 0, Component.NEG_CE, 4.0)]
    b = LossBreakdown.from_records(recs)
    # a: 6 / 2 = 3 < b: 4 / 1
    assert {k[0] for k in select_per_image(b, 0.5).kept} == {"a"}


def test_per_object_example():
    vals = [0.1, 0.2, 0.9, 1.5]
    recs = [LossRecord("f", i, Component.POS_CE, v, i) for i, v in enumerate(vals)]
    recs += [LossRecord("f", i, Component.BOX, 1.0, i) for i in range(4)]
    recs += [LossRecord("f", 10 + i, Component.NEG_CE, float(i)) for i in range(12)]
    b = LossBreakdown.from_records(recs)
    m = select_per_object(b, 0.5, 1.0, 1.0)
    assert {k[1] for k in m.kept if k[2] is Component.POS_CE} == {0, 1}
    assert sum(k[2] is Component.NEG_CE for k in m.kept) == 12
    assert sum(k[2] is Component.BOX for k in m.kept) == 4
    assert len(select_per_object(b, 1, 1, 1)) == len(b)


def test_per_object_never_empties_components():
    recs = [LossRecord("f", 0, Component.POS_CE, 9.0, 0), LossRecord("f", 0, Component.BOX, 9.0, 0),
            LossRecord("f", 5, Component.NEG_CE, 0.1)]
    m = select_per_object(LossBreakdown.from_records(recs), 0.01, 0.01, 0.01)
    assert len(m) == 3


def test_empty_batch():
    b = LossBreakdown.from_records([], {})
    with pytest.raises(EmptyBatch):
        select_per_image(b, 0.5)
    with pytest.raises(EmptyBatch):
        select_per_object(b, 0.5, 0.5, 0.5)


def test_none_mode_keeps_all():
    b = _frames_with_totals([3, 1])
    assert len(select(b, SelectionMode.NONE, 0.1)) == 2


def test_select_accepts_schedule_dict():
    b = _frames_with_totals([3, 1, 2, 0])
    R = keep_fractions(5, ScheduleParams(tau=0.5, epoch_constant=5))
    assert select(b, "per-image", R).kept == select_per_image(b, 0.5).kept
    assert select(b, "per-object", R).kept == select_per_object(b, 0.5, 0.5, 0.5).kept


def test_cross_select_follows_peer_ranking():
    b1 = _frames_with_totals([1, 2, 3, 4])
    b2 = b1.with_values(np.array([4.0, 3.0, 2.0, 1.0]))
    m1, m2 = cross_select(b1, b2, SelectionMode.PER_IMAGE, 0.5)
    assert {k[0] for k in m1.kept} == {"f2", "f3"}
    assert {k[0] for k in m2.kept} == {"f0", "f1"}


def test_cross_select_key_mismatch():
    b1 = _frames_with_totals([1, 2])
    b2 = _frames_with_totals([1, 2, 3])
    with pytest.raises(KeyMismatch):
        cross_select(b1, b2, SelectionMode.PER_OBJECT, (1, 1, 1))


@given(st.lists(st.integers(0, 20), min_size=1, max_size=30), st.floats(0.1, 10))
def test_rank_invariance_under_scaling(vals, c):
    recs = [LossRecord(f"f{i % 4}", i, Component.POS_CE, v / 4, 0) for i, v in enumerate(vals)]
    b = LossBreakdown.from_records(recs)
    scaled = b.with_values(b.values * c)
    assert select_per_object(b, 0.5, 1, 1).kept == select_per_object(scaled, 0.5, 1, 1).kept


def test_mask_flags_for_other_breakdown():
    b = _frames_with_totals([1, 2, 3])
    m = select_per_image(b, 0.34)
    sub = LossBreakdown.from_records([r for r in b.records if r.frame_id != "f1"])
    assert m.flags_for(sub).tolist() == [True, False]
    assert SelectionMask.full(b).flags.all()


def test_expected_noisy_zero_p():
    for mode in CountMode:
        assert expected_noisy_remaining(BatchNoiseParams(16, 0.0, mode=mode)) == (0.0, 0.0)


def test_expected_noisy_direct_summation():
    from math import comb, floor

    N, p = 16, 0.25
    d = floor(p * N)
    direct = sum(max(0, k - d) * comb(N, k) * p**k * (1 - p) ** (N - k) for k in range(N + 1))
    count, frac = expected_noisy_remaining(BatchNoiseParams(N, p))
    assert count == pytest.approx(direct, abs=1e-12)
    assert frac == pytest.approx(direct / (N - d), abs=1e-12)
    lit = sum(max(0, k - p * k) * comb(N, k) * p**k * (1 - p) ** (N - k) for k in range(N + 1))
    assert expected_noisy_remaining(BatchNoiseParams(N, p, mode="literal"))[0] == pytest.approx(lit, abs=1e-12)


def test_per_object_effective_batch():
    p = BatchNoiseParams(8, 0.25, phi=3.5, per_object=True)
    assert p.effective_n == 28
    assert BatchNoiseParams(8, 0.25, phi=3.5).effective_n == 8


def test_batch_params_validation():
    with pytest.raises(ValueError):
        BatchNoiseParams(0, 0.1)
    with pytest.raises(ValueError):
        BatchNoiseParams(4, 1.1)
    with pytest.raises(ValueError):
        BatchNoiseParams(4, 0.1, phi=0)
