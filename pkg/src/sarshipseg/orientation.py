"""Orientation-aware feature enhancement.

Three stages, applied to one feature map:
  1) orientation branches — the channels are split into one group per
     preset angle; each group is resampled on a rotated grid and passed
     through that angle's own 3x3 convolution, then groups are concatenated
     back in angle order;
  2) polar embedding — a parameter-free [2, H, W] field of normalized
     radius and angle per pixel, projected to the feature width by a 1x1
     convolution;
  3) dynamic fusion — a per-pixel two-way softmax gate blends the
     orientation features with the projected polar features.

Coordinate convention (shared by rotation grids and the polar field): pixel
centers lie on a normalized lattice with corners exactly at +-1
(align-corners); a size-1 axis sits at 0. Rotation grids use bilinear
sampling with zero padding outside the image.
"""

from __future__ import annotations

import math
import threading
from typing import Optional

import torch
from torch import nn
import torch.nn.functional as F


def lattice_coords(
    height: int, width: int, device=None, dtype=torch.float32
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel (x, y) on the +-1 align-corners lattice, each [H, W]."""
    if height < 1 or width < 1:
        raise ValueError(f"lattice must be at least 1x1, got {height}x{width}")
    xs = (
        torch.linspace(-1.0, 1.0, width, device=device, dtype=dtype)
        if width > 1
        else torch.zeros(1, device=device, dtype=dtype)
    )
    ys = (
        torch.linspace(-1.0, 1.0, height, device=device, dtype=dtype)
        if height > 1
        else torch.zeros(1, device=device, dtype=dtype)
    )
    y, x = torch.meshgrid(ys, xs, indexing="ij")
    return x, y


def build_rotation_grid(
    theta: float, height: int, width: int, device=None, dtype=torch.float32
) -> torch.Tensor:
    """Sampling grid [H, W, 2] whose coordinate pairs are rotated by theta.

    Output pixel (i, j) samples the input at R(theta) @ (x_j, y_i). theta=0
    reproduces the identity grid exactly.
    """
    x, y = lattice_coords(height, width, device=device, dtype=dtype)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    gx = cos_t * x - sin_t * y
    gy = sin_t * x + cos_t * y
    return torch.stack((gx, gy), dim=-1)


def grid_sample(f: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Bilinear sampling of [C, H, W] (or [B, C, H, W]) at normalized grid coords.

    Out-of-bounds samples contribute zero. Differentiable with respect to f.
    """
    if not torch.isfinite(grid).all():
        raise ValueError("sampling grid contains non-finite coordinates")
    single = f.dim() == 3
    if single:
        f = f.unsqueeze(0)
    if grid.dim() == 3:
        grid = grid.unsqueeze(0).expand(f.shape[0], -1, -1, -1)
    out = F.grid_sample(f, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    return out.squeeze(0) if single else out


def polar_field(height: int, width: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """Parameter-free [2, H, W] field of (r_norm, theta_norm) per pixel.

    r = sqrt(x^2 + y^2) / sqrt(2) in [0, 1], exactly 1 at the lattice corners;
    theta = (atan2(y, x) + pi) / (2 pi) in (0, 1], with atan2(0, 0) = 0 so the
    exact center maps to 0.5.
    """
    x, y = lattice_coords(height, width, device=device, dtype=dtype)
    r_norm = torch.sqrt(x * x + y * y) / math.sqrt(2.0)
    theta_norm = (torch.atan2(y, x) + math.pi) / (2.0 * math.pi)
    return torch.stack((r_norm, theta_norm), dim=0)


class RotationBank(nn.Module):
    """Preset angles theta_i = i*pi/N, their cached grids, and per-angle convs.

    Each conv maps a channel group of width C/N to itself (3x3, same padding).
    Grids are precomputed per (H, W, device, dtype) under a lock so concurrent
    forward passes initialize each key once.
    """

    def __init__(self, channels: int, num_angles: int):
        super().__init__()
        if channels % num_angles != 0:
            raise ValueError(
                f"channels {channels} must be divisible by num_angles {num_angles}"
            )
        self.num_angles = num_angles
        self.group_channels = channels // num_angles
        self.angles = tuple(i * math.pi / num_angles for i in range(num_angles))
        self.kernels = nn.ModuleList(
            nn.Conv2d(self.group_channels, self.group_channels, 3, padding=1)
            for _ in range(num_angles)
        )
        self._grid_cache: dict[tuple, torch.Tensor] = {}
        self._grid_lock = threading.Lock()

    def grids(self, height: int, width: int, device, dtype) -> torch.Tensor:
        """Stacked sampling grids [N, H, W, 2] for the preset angles."""
        key = (height, width, str(device), dtype)
        cached = self._grid_cache.get(key)
        if cached is not None:
            return cached
        with self._grid_lock:
            cached = self._grid_cache.get(key)
            if cached is None:
                cached = torch.stack(
                    [
                        build_rotation_grid(t, height, width, device=device, dtype=dtype)
                        for t in self.angles
                    ]
                )
                self._grid_cache[key] = cached
        return cached


_ACTIVATIONS = {"relu": F.relu, "gelu": F.gelu}


class OrientationEmbedding(nn.Module):
    """Full enhancement module: rotated branches + polar prior + fused gate."""

    def __init__(
        self,
        channels: int,
        num_angles: int = 4,
        activation: Optional[str] = "relu",
    ):
        super().__init__()
        if activation is not None and activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.channels = channels
        self.bank = RotationBank(channels, num_angles)
        self.activation = activation
        self.polar_proj = nn.Conv2d(2, channels, kernel_size=1)
        self.gate = nn.Conv2d(2 * channels, 2, kernel_size=1)

    def orientation_branches(self, x: torch.Tensor) -> torch.Tensor:
        """Rotate-sample and convolve each channel group, concatenated in angle order."""
        single = x.dim() == 3
        if single:
            x = x.unsqueeze(0)
        b, c, h, w = x.shape
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        grids = self.bank.grids(h, w, x.device, x.dtype)
        groups = x.chunk(self.bank.num_angles, dim=1)
        outs = []
        for i, (group, conv) in enumerate(zip(groups, self.bank.kernels)):
            rotated = grid_sample(group, grids[i])
            outs.append(conv(rotated))
        out = torch.cat(outs, dim=1)
        if self.activation is not None:
            out = _ACTIVATIONS[self.activation](out)
        return out.squeeze(0) if single else out

    def project_polar(self, f_polar: torch.Tensor) -> torch.Tensor:
        """1x1 projection of the [2, H, W] polar field to [C, H, W]."""
        single = f_polar.dim() == 3
        if single:
            f_polar = f_polar.unsqueeze(0)
        out = self.polar_proj(f_polar)
        return out.squeeze(0) if single else out

    def fusion_weights(self, f_orient: torch.Tensor, f_polar_proj: torch.Tensor) -> torch.Tensor:
        """Per-pixel gate [B, 1, H, W] in (0, 1); plane pair softmaxed to complement."""
        concat = torch.cat((f_orient, f_polar_proj), dim=-3)
        logits = self.gate(concat)
        planes = torch.softmax(logits, dim=-3)
        return planes.narrow(-3, 0, 1)

    def dynamic_fusion(self, f_orient: torch.Tensor, f_polar_proj: torch.Tensor) -> torch.Tensor:
        """Convex per-pixel blend of orientation and polar features."""
        if f_orient.shape != f_polar_proj.shape:
            raise ValueError(
                f"fusion inputs must match: {tuple(f_orient.shape)} vs "
                f"{tuple(f_polar_proj.shape)}"
            )
        w = self.fusion_weights(f_orient, f_polar_proj)
        return f_orient * w + f_polar_proj * (1.0 - w)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        single = x.dim() == 3
        if single:
            x = x.unsqueeze(0)
        f_orient = self.orientation_branches(x)
        polar = polar_field(x.shape[-2], x.shape[-1], device=x.device, dtype=x.dtype)
        f_polar_proj = self.project_polar(polar.unsqueeze(0).expand(x.shape[0], -1, -1, -1))
        out = self.dynamic_fusion(f_orient, f_polar_proj)
        return out.squeeze(0) if single else out
