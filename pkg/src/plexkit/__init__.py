"""Tile-level plexus classification: stain normalization, tiling, a
concept-attention head over frozen embeddings, training, and evaluation."""

__version__ = "0.1.0"

from .embeddings import ConceptSet, EmbeddingBag, cosine, read_bags, unit_normalize, write_bags
from .evaluate import ConfusionMatrix, MetricsReport, confusion, cross_validate, kfold_split, metrics, roc_auc
from .head import HeadConfig, HeadParams, forward, grad, loss
from .optim import TrainConfig, adamw_step, lr_at, train
from .stain import StainProfile, fit_stain_profile, normalize_to_reference, od_to_rgb, rgb_to_od
from .synthetic import SynthSpec, gen_bags, gen_slide
from .tiling import SamplePlan, TileRecord, balanced_sample, downsample, label_tile, tile_grid

__all__ = [
    "ConceptSet",
    "ConfusionMatrix",
    "EmbeddingBag",
    "HeadConfig",
    "HeadParams",
    "MetricsReport",
    "SamplePlan",
    "StainProfile",
    "SynthSpec",
    "TileRecord",
    "TrainConfig",
    "adamw_step",
    "balanced_sample",
    "confusion",
    "cosine",
    "cross_validate",
    "downsample",
    "fit_stain_profile",
    "forward",
    "gen_bags",
    "gen_slide",
    "grad",
    "kfold_split",
    "label_tile",
    "loss",
    "lr_at",
    "metrics",
    "normalize_to_reference",
    "od_to_rgb",
    "read_bags",
    "rgb_to_od",
    "roc_auc",
    "tile_grid",
    "train",
    "unit_normalize",
    "write_bags",
]
