"""Channel-averaged feature heatmaps for qualitative inspection.

Heatmap values are the per-pixel channel means of a feature map, floored at
zero. Rendering uses the viridis colormap with a fixed scale: 0 maps to the
colormap minimum and the per-image maximum maps to the top; an all-zero map
renders uniformly at the scale minimum.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import matplotlib
import numpy as np
import torch
from PIL import Image

from .coco_io import read_image_png
from .model import load_model

_CMAP = matplotlib.colormaps["viridis"]


def channel_mean(feature: torch.Tensor) -> np.ndarray:
    """[C, H, W] (or [1, C, H, W]) -> per-pixel channel mean, floored at 0."""
    if feature.dim() == 4:
        feature = feature.squeeze(0)
    return feature.mean(dim=0).clamp_min(0.0).numpy()


def render_heatmap(values: np.ndarray) -> np.ndarray:
    """Mean map -> uint8 RGB via viridis with the documented fixed scale."""
    vmax = float(values.max())
    norm = values / vmax if vmax > 0 else np.zeros_like(values)
    rgba = _CMAP(norm)
    return (rgba[..., :3] * 255).round().astype(np.uint8)


def save_heatmap(path, feature: torch.Tensor) -> None:
    Image.fromarray(render_heatmap(channel_mean(feature))).save(path)


def visualize_checkpoint(
    checkpoint_path,
    image_path,
    out_dir,
    baseline_checkpoint: Optional[str] = None,
) -> list[Path]:
    """Emit C2 heatmaps before/after orientation enhancement (and from a
    separate no-enhancement checkpoint when given). Returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    image = torch.from_numpy(read_image_png(image_path))

    model, _ = load_model(checkpoint_path)
    model.eval()
    feats = model.visualization_features(image)
    written = []
    p = out / "c2_before_enhancement.png"
    save_heatmap(p, feats["c2_projected"])
    written.append(p)
    if "c2_enhanced" in feats:
        p = out / "c2_after_enhancement.png"
        save_heatmap(p, feats["c2_enhanced"])
        written.append(p)
    if baseline_checkpoint is not None:
        base_model, _ = load_model(baseline_checkpoint)
        base_model.eval()
        base_feats = base_model.visualization_features(image)
        p = out / "c2_no_enhancement_baseline.png"
        save_heatmap(p, base_feats["c2_projected"])
        written.append(p)
    return written
