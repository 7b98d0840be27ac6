"""Fully-inductive node classification with attention over closed-form linear graph models."""

__version__ = "0.1.0"

from .attention import AttentionModel, load_model, save_model
from .conv_ops import DEFAULT_CHANNELS, ChannelSpec, build_channel_set
from .graph_store import GraphDataset, load_dataset, write_dataset
from .trainer import TrainConfig, evaluate, inductive_infer, train

__all__ = [
    "AttentionModel",
    "ChannelSpec",
    "DEFAULT_CHANNELS",
    "GraphDataset",
    "TrainConfig",
    "build_channel_set",
    "evaluate",
    "inductive_infer",
    "load_dataset",
    "load_model",
    "save_model",
    "train",
    "write_dataset",
]
