"""Synthetic scenes: a grid of cell feature vectors with category templates
painted into object cells over unit Gaussian noise."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from noisydet.geometry import AnchorGrid, BoundingBox, build_anchor_grid
from noisydet.label_io import Annotation, Dataset, Frame


@dataclass(frozen=True)
class SceneConfig:
    grid: tuple[int, int] = (16, 16)
    feature_dim: int = 4
    categories: int = 3
    objects_per_scene: tuple[int, int] = (1, 4)  # inclusive
    object_cells: tuple[int, int] = (3, 5)  # side length in cells, inclusive
    template_snr: float = 3.0
    cell_size: float = 8.0
    anchor_cells: tuple[float, ...] = (3.0, 5.0)
    context: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(self.grid))
        object.__setattr__(self, "objects_per_scene", tuple(self.objects_per_scene))
        object.__setattr__(self, "object_cells", tuple(self.object_cells))
        object.__setattr__(self, "anchor_cells", tuple(float(a) for a in self.anchor_cells))
        if self.categories < 2:
            raise ValueError("need at least two categories")
        if self.feature_dim < self.categories:
            raise ValueError("feature_dim must be >= categories")
        lo, hi = self.object_cells
        if lo < 2 or hi < lo or hi > min(self.grid):
            raise ValueError("object side range must lie in [2, grid]")

    @property
    def image_size(self) -> tuple[float, float]:
        rows, cols = self.grid
        return (cols * self.cell_size, rows * self.cell_size)

    @property
    def category_set(self) -> tuple[str, ...]:
        return tuple(f"c{i}" for i in range(self.categories))

    @property
    def n_cells(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def input_dim(self) -> int:
        return (2 * self.context + 1) ** 2 * self.feature_dim

    def to_dict(self) -> dict:
        return asdict(self)


def anchor_grid(cfg: SceneConfig) -> AnchorGrid:
    return _anchor_grid(cfg.image_size, cfg.grid, cfg.anchor_cells, cfg.cell_size)


@lru_cache(maxsize=16)
def _anchor_grid(image_size, grid, anchor_cells, cell_size) -> AnchorGrid:
    sizes = [(a * cell_size, a * cell_size) for a in anchor_cells]
    return build_anchor_grid(image_size, grid, sizes)


def templates(cfg: SceneConfig) -> np.ndarray:
    """Orthonormal category templates, shape ``(K, feature_dim)``."""
    rng = np.random.default_rng([cfg.seed, 0x7E3])
    q, _ = np.linalg.qr(rng.standard_normal((cfg.feature_dim, cfg.categories)))
    return q.T.copy()


def frame_id_for(index: int) -> str:
    return f"{index:06d}"


def generate_scene(cfg: SceneConfig, index: int, _templates: np.ndarray | None = None) -> tuple[np.ndarray, Frame]:
    """Feature map ``(rows, cols, feature_dim)`` and its exact labels.

    Objects are cell-aligned rectangles that do not overlap; placement is
    retried a bounded number of times, so crowded scenes may hold fewer
    objects than drawn.
    """
    rows, cols = cfg.grid
    rng = np.random.default_rng([cfg.seed, 1, int(index)])
    tmpl = templates(cfg) if _templates is None else _templates
    feats = rng.standard_normal((rows, cols, cfg.feature_dim))
    occupied = np.zeros((rows, cols), dtype=bool)
    lo_n, hi_n = cfg.objects_per_scene
    lo_s, hi_s = cfg.object_cells
    m = int(rng.integers(lo_n, hi_n + 1))
    anns = []
    cs = cfg.cell_size
    for _ in range(m):
        for _attempt in range(50):
            w, h = (int(v) for v in rng.integers(lo_s, hi_s + 1, size=2))
            c0 = int(rng.integers(0, cols - w + 1))
            r0 = int(rng.integers(0, rows - h + 1))
            if not occupied[r0 : r0 + h, c0 : c0 + w].any():
                break
        else:
            continue
        cat = int(rng.integers(cfg.categories))
        occupied[r0 : r0 + h, c0 : c0 + w] = True
        feats[r0 : r0 + h, c0 : c0 + w] += cfg.template_snr * tmpl[cat]
        box = BoundingBox(c0 * cs, r0 * cs, (c0 + w) * cs, (r0 + h) * cs)
        anns.append(Annotation(category=cfg.category_set[cat], box=box, truncated=0.0, occluded=0))
    return feats, Frame(frame_id_for(index), cfg.image_size, tuple(anns))


def generate_split(cfg: SceneConfig, start: int, count: int) -> tuple[np.ndarray, Dataset]:
    tmpl = templates(cfg)
    feats, frames = [], []
    for i in range(start, start + count):
        f, fr = generate_scene(cfg, i, tmpl)
        feats.append(f)
        frames.append(fr)
    rows, cols = cfg.grid
    arr = np.stack(feats) if feats else np.zeros((0, rows, cols, cfg.feature_dim))
    return arr, Dataset(tuple(frames), cfg.category_set)


def cell_inputs(features: np.ndarray, context: int) -> np.ndarray:
    """Zero-padded ``(2c+1)^2`` neighbourhood of every cell, flattened.

    ``(..., rows, cols, D)`` maps to ``(..., rows*cols, (2c+1)^2 * D)``.
    """
    *lead, rows, cols, d = features.shape
    if context == 0:
        return features.reshape(*lead, rows * cols, d)
    k = 2 * context + 1
    pad = [(0, 0)] * len(lead) + [(context, context), (context, context), (0, 0)]
    padded = np.pad(features, pad)
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(-3, -2))
    # win: (..., rows, cols, D, k, k) -> (..., rows, cols, k, k, D)
    win = np.moveaxis(win, -3, -1)
    return np.ascontiguousarray(win).reshape(*lead, rows * cols, k * k * d)
