"""Stain-style transfer for histopathology tiles.

Gray-normalize a tile, then recolor it with a generator trained on the
target institute's tiles, so a tumor classifier trained there keeps working
on tiles from other institutes.
"""

from .colorops import to_gray
from .data import Dataset, LabeledTile, StainStyleParams, load_manifest, make_synthetic_benchmark, synth_tile
from .losses import LossWeights
from .training import TrainConfig, apply_sst, load_checkpoint, save_checkpoint, train_classifier, train_sst

__all__ = [
    "Dataset",
    "LabeledTile",
    "LossWeights",
    "StainStyleParams",
    "TrainConfig",
    "apply_sst",
    "load_checkpoint",
    "load_manifest",
    "make_synthetic_benchmark",
    "save_checkpoint",
    "synth_tile",
    "to_gray",
    "train_classifier",
    "train_sst",
]
