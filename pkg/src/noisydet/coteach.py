"""Co-teaching selection: keep-fraction schedule, per-image and per-object
selectors, the cross-network exchange, and residual-noise analysis.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import binom

from noisydet.multibox_loss import Component, LossBreakdown, ceil_count


class SelectionMode(str, enum.Enum):
    NONE = "none"
    PER_IMAGE = "per-image"
    PER_OBJECT = "per-object"


class EmptyBatch(ValueError):
    pass


class KeyMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleParams:
    """Excluded-proportion targets and the ramp length in epochs.

    ``tau`` drives per-image selection and is the fallback for any
    component whose own value is left as None.
    """

    tau: float = 0.0
    tau_pos: float | None = None
    tau_neg: float | None = None
    tau_box: float | None = None
    epoch_constant: int = 15

    def __post_init__(self):
        for name in ("tau", "tau_pos", "tau_neg", "tau_box"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        if int(self.epoch_constant) < 1:
            raise ValueError("epoch_constant must be >= 1")

    def tau_for(self, component: Component | None = None) -> float:
        if component is None:
            return self.tau
        own = {Component.POS_CE: self.tau_pos, Component.NEG_CE: self.tau_neg, Component.BOX: self.tau_box}[Component(component)]
        return self.tau if own is None else own


def keep_fraction(epoch: int, s: ScheduleParams, component: Component | None = None) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return 1.0 - s.tau_for(component) * min(epoch / s.epoch_constant, 1.0)


def keep_fractions(epoch: int, s: ScheduleParams) -> dict:
    """``{None: R_image, POS_CE: R_pos, NEG_CE: R_neg, BOX: R_box}``."""
    out = {None: keep_fraction(epoch, s)}
    for c in Component:
        out[c] = keep_fraction(epoch, s, c)
    return out


@dataclass(frozen=True, eq=False)
class SelectionMask:
    """Kept records of the breakdown the mask was derived from.

    ``flags`` lines up with that breakdown's canonical record order, which is
    shared by every breakdown over the same keys.
    """

    mode: SelectionMode
    flags: np.ndarray
    _frame_ids: np.ndarray
    _anchor_ids: np.ndarray
    _components: np.ndarray

    @classmethod
    def from_flags(cls, b: LossBreakdown, flags: np.ndarray, mode: SelectionMode) -> "SelectionMask":
        return cls(SelectionMode(mode), np.asarray(flags, dtype=bool), b.frame_ids, b.anchor_ids, b.components)

    @classmethod
    def full(cls, b: LossBreakdown, mode: SelectionMode = SelectionMode.NONE) -> "SelectionMask":
        return cls.from_flags(b, np.ones(len(b), dtype=bool), mode)

    @property
    def kept(self) -> frozenset:
        f = self.flags
        return frozenset(
            (str(a), int(b), Component(int(c)))
            for a, b, c in zip(self._frame_ids[f], self._anchor_ids[f], self._components[f])
        )

    def __len__(self) -> int:
        return int(self.flags.sum())

    def flags_for(self, b: LossBreakdown) -> np.ndarray:
        """Boolean flags for ``b``'s records; keys absent from the mask are excluded."""
        if (
            len(b) == len(self.flags)
            and np.array_equal(b.frame_ids, self._frame_ids)
            and np.array_equal(b.anchor_ids, self._anchor_ids)
            and np.array_equal(b.components, self._components)
        ):
            return self.flags.copy()
        kept = self.kept
        return np.array(
            [(str(f), int(a), Component(int(c))) in kept for f, a, c in zip(b.frame_ids, b.anchor_ids, b.components)],
            dtype=bool,
        )


def select_per_image(b: LossBreakdown, R: float) -> SelectionMask:
    """Keep every record of the ``ceil(R * n_frames)`` lowest-loss frames."""
    if not 0.0 < R <= 1.0:
        raise ValueError("keep fraction must lie in (0, 1]")
    frames = b.frames
    if not frames:
        raise EmptyBatch("breakdown has no frames")
    totals = b.frame_totals()
    ranked = sorted(frames, key=lambda f: (totals[f], f))
    keep = set(ranked[: ceil_count(R * len(frames))])
    flags = np.isin(b.frame_ids, np.array(sorted(keep), dtype=str))
    return SelectionMask.from_flags(b, flags, SelectionMode.PER_IMAGE)


def select_per_object(b: LossBreakdown, R_pos: float, R_neg: float, R_box: float) -> SelectionMask:
    """Keep the ``ceil(R_c * n_c)`` lowest-loss records of each component,
    ranked across the whole batch; ties go to (frame_id, anchor_id)."""
    Rs = {Component.POS_CE: R_pos, Component.NEG_CE: R_neg, Component.BOX: R_box}
    for R in Rs.values():
        if not 0.0 < R <= 1.0:
            raise ValueError("keep fractions must lie in (0, 1]")
    if not b.positives:
        raise EmptyBatch("breakdown has no frames")
    flags = np.zeros(len(b), dtype=bool)
    for comp, R in Rs.items():
        idx = np.flatnonzero(b.components == int(comp))
        if idx.size == 0:
            continue
        order = np.lexsort((b.anchor_ids[idx], b.frame_ids[idx], b.values[idx]))
        flags[idx[order[: ceil_count(R * idx.size)]]] = True
    return SelectionMask.from_flags(b, flags, SelectionMode.PER_OBJECT)


def select(b: LossBreakdown, mode: SelectionMode | str, Rs) -> SelectionMask:
    """Dispatch on mode. ``Rs`` is a float for per-image, a
    ``(R_pos, R_neg, R_box)`` triple or the dict from :func:`keep_fractions`
    for per-object; ignored for NONE."""
    mode = SelectionMode(mode)
    if mode is SelectionMode.NONE:
        return SelectionMask.full(b)
    if isinstance(Rs, dict):
        Rs = Rs[None] if mode is SelectionMode.PER_IMAGE else (Rs[Component.POS_CE], Rs[Component.NEG_CE], Rs[Component.BOX])
    if mode is SelectionMode.PER_IMAGE:
        return select_per_image(b, float(Rs))
    return select_per_object(b, *Rs)


def cross_select(
    b_net1: LossBreakdown, b_net2: LossBreakdown, mode: SelectionMode | str, Rs
) -> tuple[SelectionMask, SelectionMask]:
    """Each network's mask is chosen from its peer's loss values."""
    if not b_net1.same_keys(b_net2):
        raise KeyMismatch("breakdowns cover different record keys")
    return select(b_net2, mode, Rs), select(b_net1, mode, Rs)


# ---- residual noise in a pruned batch --------------------------------------


class CountMode(str, enum.Enum):
    LITERAL = "literal"
    CAPACITY = "capacity"


@dataclass(frozen=True)
class BatchNoiseParams:
    """Batch of ``n`` items (images; objects when ``per_object`` scales by phi)."""

    n: int
    p: float
    phi: float = 1.0
    mode: CountMode = CountMode.CAPACITY
    per_object: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", CountMode(self.mode))
        if self.n < 1:
            raise ValueError("batch size must be >= 1")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        if not self.phi > 0:
            raise ValueError("phi must be positive")

    @property
    def effective_n(self) -> int:
        return max(1, int(round(self.phi * self.n))) if self.per_object else int(self.n)


def expected_noisy_remaining(params: BatchNoiseParams) -> tuple[float, float]:
    """Expected noisy items left after discarding, and their share of what is left.

    LITERAL evaluates ``sum_k max(0, k - p k) C(N,k) p^k (1-p)^(N-k)`` and
    divides by ``(1-p) N``. CAPACITY discards a fixed budget ``d = floor(p N)``
    per batch: ``sum_k max(0, k - d) C(N,k) p^k (1-p)^(N-k)`` over ``N - d``.
    A zero denominator gives a zero fraction.
    """
    N, p = params.effective_n, params.p
    k = np.arange(N + 1)
    pmf = binom.pmf(k, N, p)
    if params.mode is CountMode.LITERAL:
        count = float(np.sum(np.maximum(0.0, k - p * k) * pmf))
        denom = (1.0 - p) * N
    else:
        d = int(math.floor(round(p * N, 9)))
        count = float(np.sum(np.maximum(0, k - d) * pmf))
        denom = N - d
    frac = count / denom if denom > 0 else 0.0
    return count, frac
