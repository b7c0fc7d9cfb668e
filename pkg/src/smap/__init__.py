"""Semantic prefix tokenizer and autoregressive flow generator at desk scale."""

from .card import CARD, CardConfig, ConditionMode, param_count
from .config import RunConfig, parse_config, serialize
from .data import CLASSES, ShapesDataset, make_shapes_dataset
from .io import ModelBundle, load_checkpoint, read_image, save_checkpoint, write_image
from .regularizers import regu
from .tokenizer import SMAPTokenizer, TokenizerConfig
from .training import TrainConfig, train_generator, train_tokenizer

__all__ = [
    "CARD", "CLASSES", "CardConfig", "ConditionMode", "ModelBundle", "RunConfig", "SMAPTokenizer",
    "ShapesDataset", "TokenizerConfig", "TrainConfig", "load_checkpoint", "make_shapes_dataset",
    "param_count", "parse_config", "read_image", "regu", "save_checkpoint", "serialize",
    "train_generator", "train_tokenizer", "write_image",
]
