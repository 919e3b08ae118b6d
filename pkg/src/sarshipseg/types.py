"""Shared domain types and array contracts.

All feature arrays are dense real tensors in [C, H, W] layout with an
optional leading batch axis. Every operation in the package is defined
per-sample and maps cleanly over the batch axis. Types are treated as
immutable after construction and are safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

PYRAMID_STRIDES = (4, 8, 16, 32)
LEVEL_NAMES = ("C2", "C3", "C4", "C5")
REFERENCE_CHANNELS = (256, 512, 1024, 2048)


class ShapeError(ValueError):
    """Raised when an array violates a declared shape contract."""


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise ShapeError(f"{what} contains non-finite values")
    return t


@dataclass(frozen=True)
class FeatureMap:
    """One backbone/decoder feature level.

    data: [C, H, W] or [B, C, H, W]
    stride: downsampling factor relative to the input image.
    """

    data: torch.Tensor
    stride: int

    def __post_init__(self):
        if self.data.dim() not in (3, 4):
            raise ShapeError(
                f"feature map must be [C,H,W] or [B,C,H,W], got {tuple(self.data.shape)}"
            )
        if min(self.data.shape[-3:]) < 1:
            raise ShapeError(f"feature map dims must be >= 1, got {tuple(self.data.shape)}")
        if self.stride < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")

    @property
    def channels(self) -> int:
        return self.data.shape[-3]

    @property
    def height(self) -> int:
        return self.data.shape[-2]

    @property
    def width(self) -> int:
        return self.data.shape[-1]


@dataclass(frozen=True)
class FeaturePyramid:
    """The four multi-scale feature levels C2..C5 at strides 4/8/16/32."""

    levels: tuple[FeatureMap, ...]
    input_height: int
    input_width: int

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i: int) -> FeatureMap:
        return self.levels[i]


def validate_pyramid(p: FeaturePyramid, base_channels: int = 256) -> FeaturePyramid:
    """Check stride and channel-width invariants; return the pyramid unchanged.

    Channel widths must double level to level: (w, 2w, 4w, 8w) with
    w = base_channels. The default base of 256 is the full-scale reference;
    reduced-width configurations pass their own base.
    """
    if len(p.levels) != 4:
        raise ShapeError(f"expected 4 levels, got {len(p.levels)}")
    expected_channels = tuple(base_channels * (1 << i) for i in range(4))
    for name, level, stride, ch in zip(LEVEL_NAMES, p.levels, PYRAMID_STRIDES, expected_channels):
        if level.stride != stride:
            raise ShapeError(f"level {name}: expected stride {stride}, got {level.stride}")
        if level.channels != ch:
            raise ShapeError(f"level {name}: expected {ch} channels, got {level.channels}")
        check_finite(level.data, f"level {name}")
    return p


def flatten_pixels(f: FeatureMap) -> torch.Tensor:
    """Flatten [C, H, W] to [L, C] pixel rows in row-major order, L = H*W.

    Batched input [B, C, H, W] maps to [B, L, C].
    """
    d = f.data if isinstance(f, FeatureMap) else f
    if d.dim() == 3:
        c, h, w = d.shape
        return d.reshape(c, h * w).transpose(0, 1)
    b, c, h, w = d.shape
    return d.reshape(b, c, h * w).transpose(1, 2)


def unflatten_pixels(x: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Inverse of flatten_pixels: [L, C] -> [C, H, W] (batch axis preserved)."""
    if x.dim() == 2:
        l, c = x.shape
        if l != height * width:
            raise ShapeError(f"cannot unflatten {l} rows to {height}x{width}")
        return x.transpose(0, 1).reshape(c, height, width)
    b, l, c = x.shape
    if l != height * width:
        raise ShapeError(f"cannot unflatten {l} rows to {height}x{width}")
    return x.transpose(1, 2).reshape(b, c, height, width)


@dataclass(frozen=True)
class QuerySet:
    """N_q query vectors, [N_q, D] or [B, N_q, D]; D = embed width (256)."""

    queries: torch.Tensor
    embed_dim: int = 256

    def __post_init__(self):
        if self.queries.dim() not in (2, 3):
            raise ShapeError(f"queries must be [N,D] or [B,N,D], got {tuple(self.queries.shape)}")
        if self.queries.shape[-1] != self.embed_dim:
            raise ShapeError(
                f"query width must be {self.embed_dim}, got {self.queries.shape[-1]}"
            )
        check_finite(self.queries, "queries")

    @property
    def num_queries(self) -> int:
        return self.queries.shape[-2]


@dataclass(frozen=True)
class InstanceSet:
    """Ground-truth or predicted instances: binary masks + labels (+ scores).

    masks: bool [N, H, W]; labels: int [N] (single class "ship" = 0);
    scores: float [N] in [0, 1], absent for ground truth.
    """

    masks: torch.Tensor
    labels: torch.Tensor
    scores: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.masks.dim() != 3:
            raise ShapeError(f"masks must be [N,H,W], got {tuple(self.masks.shape)}")
        n = self.masks.shape[0]
        if self.labels.shape != (n,):
            raise ShapeError(f"labels must align with {n} masks, got {tuple(self.labels.shape)}")
        if self.scores is not None:
            if self.scores.shape != (n,):
                raise ShapeError(
                    f"scores must align with {n} masks, got {tuple(self.scores.shape)}"
                )
            if n and (self.scores.min() < 0 or self.scores.max() > 1):
                raise ShapeError("scores must lie in [0, 1]")

    def __len__(self) -> int:
        return self.masks.shape[0]

    @property
    def height(self) -> int:
        return self.masks.shape[1]

    @property
    def width(self) -> int:
        return self.masks.shape[2]

    def areas(self) -> torch.Tensor:
        return self.masks.flatten(1).sum(dim=1)

    @staticmethod
    def empty(height: int, width: int, with_scores: bool = False) -> "InstanceSet":
        return InstanceSet(
            masks=torch.zeros(0, height, width, dtype=torch.bool),
            labels=torch.zeros(0, dtype=torch.long),
            scores=torch.zeros(0) if with_scores else None,
        )


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters shared by every model component.

    embed_dim must be divisible by num_angles (the orientation module splits
    channels into one group per angle). eta is the similarity scaling factor
    applied when prototypes are shifted by their match score; 0.1 is the
    documented default.
    """

    num_queries: int = 100
    num_angles: int = 4
    embed_dim: int = 256
    decoder_layers: int = 3
    backbone_width: int = 256
    eta: float = 0.1
    seed: int = 0
    num_heads: int = 8
    ffn_dim: int = 1024
    score_threshold: float = 0.5
    mask_threshold: float = 0.5
    use_query_init: bool = True
    use_orientation: bool = True
    orientation_activation: Optional[str] = "relu"

    def __post_init__(self):
        if self.embed_dim % self.num_angles != 0:
            raise ShapeError(
                f"embed_dim {self.embed_dim} must be divisible by num_angles {self.num_angles}"
            )
        if self.eta < 0:
            raise ShapeError(f"eta must be >= 0, got {self.eta}")
        if self.embed_dim % self.num_heads != 0:
            raise ShapeError(
                f"embed_dim {self.embed_dim} must be divisible by num_heads {self.num_heads}"
            )
        for name in ("num_queries", "num_angles", "decoder_layers", "backbone_width"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in ModelConfig.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ShapeError(f"unknown model config keys: {sorted(unknown)}")
        return ModelConfig(**known)
