"""Query-based SAR ship instance segmentation at desk scale.

Core pieces: a multi-scale query initializer and an orientation-aware
feature enhancement module inside a compact masked-attention segmentation
pipeline, plus a deterministic synthetic scene generator, COCO-style mask
AP evaluation, and a config lines-driven CLI (generate/train/eval/ablate/
visualize).
"""

from .types import (
    FeatureMap,
    FeaturePyramid,
    InstanceSet,
    ModelConfig,
    QuerySet,
    ShapeError,
    flatten_pixels,
    unflatten_pixels,
    validate_pyramid,
)
from .model import ShipInstanceSegmenter, build_model, load_model, save_checkpoint

__all__ = [
    "FeatureMap",
    "FeaturePyramid",
    "InstanceSet",
    "ModelConfig",
    "QuerySet",
    "ShapeError",
    "flatten_pixels",
    "unflatten_pixels",
    "validate_pyramid",
    "ShipInstanceSegmenter",
    "build_model",
    "load_model",
    "save_checkpoint",
]
