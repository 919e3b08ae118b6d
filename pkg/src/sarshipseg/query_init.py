"""Content-conditioned query initialization from multi-scale backbone features.

Instead of starting the transformer decoder from static learned queries,
a bank of trainable ship prototypes is matched against a fused multi-scale
summary of the current image: each pyramid level is average-pooled, tagged
with a learnable scale embedding, the four scale vectors are softly weighted
and fused, and the cosine similarity between the fused summary and each
prototype shifts that prototype before a final linear projection. Queries
therefore carry image-specific multi-scale context from step zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn
import torch.nn.functional as F

from .types import FeaturePyramid, QuerySet

COSINE_EPS = 1e-8


class ChannelProjection(nn.Module):
    """Per-level trainable 1x1 projections mapping C2..C5 to a common width."""

    def __init__(self, in_channels: Sequence[int], embed_dim: int = 256):
        super().__init__()
        self.projections = nn.ModuleList(
            nn.Conv2d(c, embed_dim, kernel_size=1) for c in in_channels
        )

    def forward(self, pyramid: FeaturePyramid) -> list[torch.Tensor]:
        """Returns one [B, D, H_i, W_i] tensor per level; spatial shape unchanged."""
        out = []
        for proj, level in zip(self.projections, pyramid.levels):
            x = level.data
            if x.dim() == 3:
                x = x.unsqueeze(0)
            out.append(proj(x))
        return out


def pool_and_embed(f: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    """Global average pool [B, C, H, W] -> [B, C], then add the scale embedding."""
    if f.dim() == 3:
        f = f.unsqueeze(0)
    return f.mean(dim=(2, 3)) + e


def stack_scales(vectors: Sequence[torch.Tensor]) -> torch.Tensor:
    """Stack per-scale vectors [B, C] into [B, 4, C], ordered C2 -> C5."""
    if len(vectors) != 4:
        raise ValueError(f"expected 4 scale vectors, got {len(vectors)}")
    return torch.stack(tuple(vectors), dim=-2)


def fuse_scales(w: torch.Tensor, stacked: torch.Tensor) -> torch.Tensor:
    """Convex combination of the pooled scale vectors: [B,4] x [B,4,C] -> [B,C]."""
    return (w.unsqueeze(-1) * stacked).sum(dim=-2)


def prototype_similarity(feature: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between a fused feature [B, C] and prototypes [N, C].

    Returns [B, N] with entries in [-1, 1]. Zero-norm vectors yield 0 through
    the epsilon-guarded denominator rather than raising.
    """
    single = feature.dim() == 1
    if single:
        feature = feature.unsqueeze(0)
    f_norm = feature.norm(dim=-1, keepdim=True).clamp_min(COSINE_EPS)  # [B,1]
    p_norm = prototypes.norm(dim=-1).clamp_min(COSINE_EPS)  # [N]
    sim = (feature @ prototypes.transpose(-1, -2)) / (f_norm * p_norm)
    sim = sim.clamp(-1.0, 1.0)
    return sim.squeeze(0) if single else sim


@dataclass
class QueryInitState:
    """Intermediates of one initialization pass, kept for inspection/tests."""

    pooled: torch.Tensor  # [B, 4, C] pooled + scale-embedded vectors
    weights: torch.Tensor  # [B, 4] scale attention, rows sum to 1
    fused: torch.Tensor  # [B, C]
    similarity: torch.Tensor  # [B, N_q] cosine scores in [-1, 1]


class ScaleAttention(nn.Module):
    """Softmax over the 4 scales of a trainable per-scale linear score."""

    def __init__(self, embed_dim: int = 256):
        super().__init__()
        self.score = nn.Linear(embed_dim, 1)

    def forward(self, stacked: torch.Tensor) -> torch.Tensor:
        logits = self.score(stacked).squeeze(-1)  # [B, 4]
        return torch.softmax(logits, dim=-1)


class MultiScaleQueryInit(nn.Module):
    """Produces per-image queries from the projected feature pyramid.

    prototypes: [N_q, D], randomly initialized (normal, std 0.02).
    scale_embeddings: [4, D], one per pyramid level.
    eta scales the per-prototype similarity shift before the output linear.
    """

    def __init__(self, num_queries: int, embed_dim: int = 256, eta: float = 0.1):
        super().__init__()
        if eta < 0:
            raise ValueError(f"eta must be >= 0, got {eta}")
        self.embed_dim = embed_dim
        self.eta = eta
        self.prototypes = nn.Parameter(torch.randn(num_queries, embed_dim) * 0.02)
        self.scale_embeddings = nn.Parameter(torch.randn(4, embed_dim) * 0.02)
        self.attention = ScaleAttention(embed_dim)
        self.out = nn.Linear(embed_dim, embed_dim)
        nn.init.zeros_(self.out.bias)

    def generate_queries(self, similarity: torch.Tensor) -> torch.Tensor:
        """Shift each prototype by eta * its score (broadcast over dims), then project.

        similarity: [B, N_q] -> queries [B, N_q, D].
        """
        shifted = self.prototypes.unsqueeze(0) + self.eta * similarity.unsqueeze(-1)
        return self.out(shifted)

    def forward(
        self, projected_levels: Sequence[torch.Tensor]
    ) -> tuple[QuerySet, QueryInitState]:
        """projected_levels: four [B, D, H_i, W_i] maps (C2..C5, common width)."""
        if len(projected_levels) != 4:
            raise ValueError(f"expected 4 projected levels, got {len(projected_levels)}")
        pooled = stack_scales(
            [pool_and_embed(f, e) for f, e in zip(projected_levels, self.scale_embeddings)]
        )
        weights = self.attention(pooled)
        fused = fuse_scales(weights, pooled)
        similarity = prototype_similarity(fused, self.prototypes)
        queries = self.generate_queries(similarity)
        state = QueryInitState(pooled=pooled, weights=weights, fused=fused, similarity=similarity)
        return QuerySet(queries=queries, embed_dim=self.embed_dim), state
