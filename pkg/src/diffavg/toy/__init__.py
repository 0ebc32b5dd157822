"""Desk-scale substrate: synthetic data, a trainable denoiser, and an embedder."""

from .data import (
    ClassSpec,
    ModeSpec,
    ToyDataset,
    ToyDatasetSpec,
    default_spec,
    generate_dataset,
    load_dataset,
    save_dataset,
    single_mode_spec,
    two_mode_spec,
)
from .denoiser import ToyConditioning, ToyDenoiser, train_toy_denoiser
from .embedder import ToyEmbedder, embed, train_toy_embedder

__all__ = [
    "ClassSpec",
    "ModeSpec",
    "ToyConditioning",
    "ToyDataset",
    "ToyDatasetSpec",
    "ToyDenoiser",
    "ToyEmbedder",
    "default_spec",
    "embed",
    "generate_dataset",
    "load_dataset",
    "save_dataset",
    "single_mode_spec",
    "train_toy_denoiser",
    "train_toy_embedder",
    "two_mode_spec",
]
