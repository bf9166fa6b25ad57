"""Polar-coordinate positional encoding for sequential recommendation."""

from .attention import EncodingKind, EncodingSpec
from .data import InteractionDataset, ingest, leave_one_out, synth_positional
from .euler import PolarPair, euler_transform, inverse_transform, polar_dot
from .model import ModelConfig, SequenceEncoder, load_checkpoint, save_checkpoint
from .training import PCLConfig, TrainConfig, train

__all__ = [
    "EncodingKind",
    "EncodingSpec",
    "InteractionDataset",
    "ModelConfig",
    "PCLConfig",
    "PolarPair",
    "SequenceEncoder",
    "TrainConfig",
    "euler_transform",
    "ingest",
    "inverse_transform",
    "leave_one_out",
    "load_checkpoint",
    "polar_dot",
    "save_checkpoint",
    "synth_positional",
    "train",
]

__version__ = "0.1.0"
