"""Small fixtures shared by several test modules."""

import numpy as np

from noisydet.geometry import BoundingBox
from noisydet.label_io import Annotation, Dataset, Frame
from noisydet.multibox_loss import LossBreakdown, frame_breakdown, targets_for_annotations
from noisydet.toy_world.model import BatchTargets, forward, init_model
from noisydet.toy_world.scene import SceneConfig, anchor_grid, cell_inputs, generate_split

TINY_SCENE = SceneConfig(grid=(5, 5), feature_dim=4, categories=2, objects_per_scene=(1, 2),
                         object_cells=(2, 3), anchor_cells=(2.0, 3.0), context=1, template_snr=2.0)


def gradient_problem(seed: int = 0, n_frames: int = 3, hidden: int = 6):
    """A float64 model with random weights and a breakdown over a tiny batch."""
    cfg = TINY_SCENE
    grid = anchor_grid(cfg)
    feats, ds = generate_split(cfg, 100 * seed, n_frames)
    x = cell_inputs(feats, cfg.context)
    targets = [targets_for_annotations(f.frame_id, grid, f.annotations, cfg.category_set) for f in ds.frames]
    model = init_model(cfg.input_dim, hidden, len(cfg.anchor_cells), cfg.categories + 1, seed, np.float64)
    rng = np.random.default_rng(seed)
    model.params[:] = rng.normal(0.0, 0.4, size=model.n_params)
    logits, offsets, _ = forward(model, x)
    bd = LossBreakdown.concat([frame_breakdown(logits[j], offsets[j], t) for j, t in enumerate(targets)])
    return model, x, BatchTargets.stack(targets), bd


def make_dataset(boxes_per_frame, categories=("Car", "Van"), size=(1242.0, 375.0)):
    """Frames ``000000``, ``000001``, ... holding the given ``(cat, l, t, r, b)`` tuples."""
    frames = []
    for i, boxes in enumerate(boxes_per_frame):
        anns = tuple(Annotation(c, BoundingBox(l, t, r, b)) for c, l, t, r, b in boxes)
        frames.append(Frame(f"{i:06d}", size, anns))
    return Dataset(tuple(frames), tuple(categories))
