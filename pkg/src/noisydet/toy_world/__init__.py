"""Desk-scale testbed: synthetic scenes, a tiny detector and the dual-network loop."""

from noisydet.toy_world.model import ToyModel, backward, forward, init_model
from noisydet.toy_world.scene import SceneConfig, anchor_grid, cell_inputs, generate_scene
from noisydet.toy_world.training import DivergenceDetected, RunHistory, TrainConfig, train_coteach

__all__ = [
    "DivergenceDetected", "RunHistory", "SceneConfig", "ToyModel", "TrainConfig",
    "anchor_grid", "backward", "cell_inputs", "forward", "generate_scene", "init_model", "train_coteach",
]
