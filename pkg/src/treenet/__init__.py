"""Tree-block networks on a small NumPy autodiff engine, with an analytic cost model."""

from treenet.blocks import (
    BlockSpec,
    build_classifier,
    build_eca,
    build_osa_block,
    build_srb,
    build_stem,
    build_tree_block_basic,
    build_tree_block_complete,
)
from treenet.cost import analyze_graph, mac_group, mac_increment, mac_standard, osa_params, param_diff, tree_params
from treenet.tensor import Tensor, no_grad
from treenet.train import DataConfig, TrainConfig, desk_config, evaluate, lr_at, make_synthetic, sgd_step, train
from treenet.zoo import ModelSpec, StageSpec, build_model, treenet_spec

__version__ = "0.1.0"

__all__ = [
    "BlockSpec",
    "DataConfig",
    "ModelSpec",
    "StageSpec",
    "Tensor",
    "TrainConfig",
    "analyze_graph",
    "build_classifier",
    "build_eca",
    "build_model",
    "build_osa_block",
    "build_srb",
    "build_stem",
    "build_tree_block_basic",
    "build_tree_block_complete",
    "desk_config",
    "evaluate",
    "lr_at",
    "mac_group",
    "mac_increment",
    "mac_standard",
    "make_synthetic",
    "no_grad",
    "osa_params",
    "param_diff",
    "sgd_step",
    "train",
    "tree_params",
    "treenet_spec",
]
