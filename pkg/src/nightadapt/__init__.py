"""Unsupervised day-to-night domain adaptation for Siamese visual tracking."""

from nightadapt.boxes import (
    BoundingBox,
    BoxTrack,
    FeatureMap,
    FeatureRole,
    FrameSequence,
    Provenance,
    center_error,
    iou,
)
from nightadapt.errors import (
    BatchError,
    ConfigError,
    DataFormatError,
    EmptyTrackError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "BatchError",
    "BoundingBox",
    "BoxTrack",
    "ConfigError",
    "DataFormatError",
    "EmptyTrackError",
    "FeatureMap",
    "FeatureRole",
    "FrameSequence",
    "Provenance",
    "ShapeError",
    "center_error",
    "iou",
]
