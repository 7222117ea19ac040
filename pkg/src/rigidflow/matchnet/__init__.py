"""Convolutional feature matcher trained as 1-D search classification."""

from . import layers, training
from .net import (
    CheckpointError,
    FeatureMap,
    NetParams,
    NetSpec,
    extract_features,
    forward_features,
    init_params,
    load_checkpoint,
    match_score,
    save_checkpoint,
)
from .training import (
    PatchDataset,
    TrainingConfig,
    argmax_accuracy,
    draw_training_set,
    make_shifted_patch_dataset,
    make_target,
    sample_training_pair,
    softmax_xent,
    train,
)

__all__ = [
    "CheckpointError",
    "FeatureMap",
    "NetParams",
    "NetSpec",
    "PatchDataset",
    "TrainingConfig",
    "argmax_accuracy",
    "draw_training_set",
    "extract_features",
    "forward_features",
    "init_params",
    "layers",
    "load_checkpoint",
    "make_shifted_patch_dataset",
    "make_target",
    "match_score",
    "sample_training_pair",
    "save_checkpoint",
    "softmax_xent",
    "train",
    "training",
]
