"""Toolkit for training and evaluating underage-screening heads on face embeddings."""

__version__ = "0.1.0"

from agescreen.data import (
    EmbeddingStore,
    Manifest,
    ManifestError,
    Metadata,
    Sample,
    load_embeddings,
    load_manifest,
    split_view,
    write_embeddings,
    write_manifest,
)
from agescreen.losses import GapRule, binary_label, focal_loss, gap_bounds
from agescreen.net import NetworkConfig, NetworkParams, forward, init_params, parameter_count

__all__ = [
    "EmbeddingStore",
    "GapRule",
    "Manifest",
    "ManifestError",
    "Metadata",
    "NetworkConfig",
    "NetworkParams",
    "Sample",
    "binary_label",
    "focal_loss",
    "forward",
    "gap_bounds",
    "init_params",
    "load_embeddings",
    "load_manifest",
    "parameter_count",
    "split_view",
    "write_embeddings",
    "write_manifest",
]
