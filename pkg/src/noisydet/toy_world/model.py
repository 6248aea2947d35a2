"""A two-layer per-cell detector head with hand-written backprop and Adam.

Each cell's input vector goes through ``tanh(x W1 + b1) W2 + b2``; the
output holds, for every anchor of that cell, ``K+1`` logits followed by
four box offsets. Weights are shared across cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from noisydet.multibox_loss import BACKGROUND, Component, FrameTargets, LossBreakdown


class ShapeMismatch(ValueError):
    pass


@dataclass
class ToyModel:
    input_dim: int
    hidden: int
    anchors_per_cell: int
    n_classes: int  # K + 1, background included
    params: np.ndarray
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    step: int = 0

    def __post_init__(self):
        if self.params.size != self.n_params:
            raise ShapeMismatch(f"expected {self.n_params} parameters, got {self.params.size}")
        if self.m is None:
            self.m = np.zeros_like(self.params)
        if self.v is None:
            self.v = np.zeros_like(self.params)

    @property
    def out_dim(self) -> int:
        return self.anchors_per_cell * (self.n_classes + 4)

    @property
    def n_params(self) -> int:
        return self.input_dim * self.hidden + self.hidden + self.hidden * self.out_dim + self.out_dim

    def unpack(self, flat: np.ndarray | None = None):
        """Views ``(W1, b1, W2, b2)`` into ``flat`` (the parameters by default)."""
        flat = self.params if flat is None else flat
        i, h, o = self.input_dim, self.hidden, self.out_dim
        s0 = i * h
        s1 = s0 + h
        s2 = s1 + h * o
        return flat[:s0].reshape(i, h), flat[s0:s1], flat[s1:s2].reshape(h, o), flat[s2:]

    def copy(self) -> "ToyModel":
        return ToyModel(self.input_dim, self.hidden, self.anchors_per_cell, self.n_classes,
                        self.params.copy(), self.m.copy(), self.v.copy(), self.step)


def init_model(input_dim: int, hidden: int, anchors_per_cell: int, n_classes: int, seed: int,
               dtype=np.float64) -> ToyModel:
    rng = np.random.default_rng([int(seed), 0xC0])
    out_dim = anchors_per_cell * (n_classes + 4)
    W1 = rng.standard_normal((input_dim, hidden)) / np.sqrt(input_dim)
    W2 = rng.standard_normal((hidden, out_dim)) * (0.1 / np.sqrt(hidden))
    flat = np.concatenate([W1.ravel(), np.zeros(hidden), W2.ravel(), np.zeros(out_dim)]).astype(dtype)
    return ToyModel(input_dim, hidden, anchors_per_cell, n_classes, flat)


@dataclass
class ForwardCache:
    x: np.ndarray  # (N, input_dim)
    h: np.ndarray  # (N, hidden)
    lead: tuple


def forward(model: ToyModel, inputs: np.ndarray, params: np.ndarray | None = None):
    """``inputs`` is ``(..., n_cells, input_dim)``.

    Returns ``(logits, offsets, cache)`` with logits ``(..., n_anchors, K+1)``
    and offsets ``(..., n_anchors, 4)``, anchors ordered cell-major. The
    network runs in the parameters' dtype; outputs are float64.
    """
    if inputs.shape[-1] != model.input_dim:
        raise ShapeMismatch(f"input dim {inputs.shape[-1]} != {model.input_dim}")
    W1, b1, W2, b2 = model.unpack(params)
    lead = inputs.shape[:-1]
    x = inputs.reshape(-1, model.input_dim).astype(W1.dtype, copy=False)
    h = np.tanh(x @ W1 + b1)
    out = (h @ W2 + b2).astype(np.float64, copy=False)
    out = out.reshape(*lead[:-1], lead[-1] * model.anchors_per_cell, model.n_classes + 4)
    return out[..., : model.n_classes], out[..., model.n_classes :], ForwardCache(x, h, lead)


@dataclass(frozen=True)
class BatchTargets:
    """Targets for a batch, stacked in frame order: ``classes`` ``(B, A)``,
    ``box_targets`` ``(B, A, 4)``."""

    frame_ids: list[str]
    classes: np.ndarray
    box_targets: np.ndarray

    @classmethod
    def stack(cls, targets: list[FrameTargets]) -> "BatchTargets":
        return cls(
            [t.frame_id for t in targets],
            np.stack([t.classes for t in targets]),
            np.stack([t.box_targets for t in targets]),
        )


def output_gradients(
    logits: np.ndarray,
    offsets: np.ndarray,
    targets: BatchTargets,
    breakdown: LossBreakdown,
    flags: np.ndarray,
    box_weight: float = 1.0,
):
    """Masked loss and its gradient with respect to the network outputs.

    The loss is the mean over frames of each frame's kept record sum divided
    by ``max(1, n_pos)``; the normaliser ignores the mask, so the loss is
    linear in the kept set.
    """
    d_logits = np.zeros_like(logits)
    d_offsets = np.zeros_like(offsets)
    n_frames = len(targets.frame_ids)
    keep = np.flatnonzero(flags)
    if keep.size == 0:
        return 0.0, d_logits, d_offsets
    frame_pos = {f: i for i, f in enumerate(targets.frame_ids)}
    npos = np.array([max(1, breakdown.positives[f]) for f in targets.frame_ids], dtype=float)
    fids = breakdown.frame_ids[keep]
    uniq, inv = np.unique(fids, return_inverse=True)
    rows = np.array([frame_pos[str(f)] for f in uniq], dtype=np.int64)[inv]
    anchors = breakdown.anchor_ids[keep]
    comps = breakdown.components[keep]
    w = 1.0 / (npos[rows] * n_frames)

    ce = comps != Component.BOX
    r, a = rows[ce], anchors[ce]
    tgt = np.where(comps[ce] == Component.NEG_CE, BACKGROUND, targets.classes[r, a])
    z = logits[r, a]
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    sm = e / e.sum(axis=1, keepdims=True)
    idx = np.arange(len(tgt))
    ce_vals = -np.log(sm[idx, tgt])
    sm[idx, tgt] -= 1.0
    np.add.at(d_logits, (r, a), sm * w[ce, None])

    bx = ~ce
    r, a = rows[bx], anchors[bx]
    d = offsets[r, a] - targets.box_targets[r, a]
    ad = np.abs(d)
    box_vals = box_weight * np.where(ad < 1.0, 0.5 * d * d, ad - 0.5).sum(axis=1)
    np.add.at(d_offsets, (r, a), box_weight * np.clip(d, -1.0, 1.0) * w[bx, None])

    loss = float((ce_vals * w[ce]).sum() + (box_vals * w[bx]).sum())
    return loss, d_logits, d_offsets


def backprop(model: ToyModel, cache: ForwardCache, d_logits: np.ndarray, d_offsets: np.ndarray,
             params: np.ndarray | None = None) -> np.ndarray:
    W1, b1, W2, b2 = model.unpack(params)
    n = cache.x.shape[0]
    d_out = np.concatenate(
        [d_logits.reshape(n, model.anchors_per_cell, model.n_classes),
         d_offsets.reshape(n, model.anchors_per_cell, 4)],
        axis=2,
    ).reshape(n, model.out_dim).astype(W2.dtype, copy=False)
    grad = np.empty_like(model.params)
    gW1, gb1, gW2, gb2 = model.unpack(grad)
    gW2[...] = cache.h.T @ d_out
    gb2[...] = d_out.sum(axis=0)
    dh = (d_out @ W2.T) * (1.0 - cache.h * cache.h)
    gW1[...] = cache.x.T @ dh
    gb1[...] = dh.sum(axis=0)
    return grad


def backward(
    model: ToyModel,
    inputs: np.ndarray,
    targets: BatchTargets,
    breakdown: LossBreakdown,
    flags: np.ndarray,
    box_weight: float = 1.0,
    params: np.ndarray | None = None,
    forward_out=None,
) -> tuple[float, np.ndarray]:
    """Masked loss and its gradient with respect to the flat parameter vector.

    ``inputs`` is ``(B, n_cells, input_dim)`` in the frame order of
    ``targets``; records whose flag is False contribute nothing.
    ``forward_out`` reuses a prior ``forward`` result for the same inputs.
    """
    logits, offsets, cache = forward(model, inputs, params) if forward_out is None else forward_out
    loss, dl, do = output_gradients(logits, offsets, targets, breakdown, flags, box_weight)
    return loss, backprop(model, cache, dl, do, params)


def masked_loss(model, inputs, targets, breakdown, flags, box_weight=1.0, params=None) -> float:
    logits, offsets, _ = forward(model, inputs, params)
    return output_gradients(logits, offsets, targets, breakdown, flags, box_weight)[0]


def adam_step(model: ToyModel, grad: np.ndarray, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    model.step += 1
    model.m *= beta1
    model.m += (1.0 - beta1) * grad
    model.v *= beta2
    model.v += (1.0 - beta2) * grad * grad
    m_hat = model.m / (1.0 - beta1 ** model.step)
    v_hat = model.v / (1.0 - beta2 ** model.step)
    with np.errstate(over="ignore", invalid="ignore"):  # blow-ups are caught by the divergence check
        model.params -= lr * m_hat / (np.sqrt(v_hat) + eps)
