"""End-to-end mask prediction pipeline.

Wiring: a small residual backbone emits C2..C5 (strides 4/8/16/32); per-level
1x1 projections map everything to the shared embed width; queries are
initialized from the projected pyramid (or from a static learned bank when
the initializer is disabled); orientation enhancement is applied to the
projected C2..C4 while C5 bypasses it; a simplified pixel decoder (3x3 conv
refinement plus top-down upsample-and-add, in place of attention-based
aggregation) produces enhanced stride-8/16/32 maps and a stride-4 per-pixel
embedding; transformer decoder layers cycle the enhanced levels in 32->16->8
order with cross-attention restricted to each query's previously predicted
foreground; class and mask heads run after every layer (deep supervision).

Checkpoints are single .npz archives mapping hierarchical parameter names to
shape-tagged arrays plus the JSON-encoded model configuration; see
save_checkpoint/load_checkpoint for the exact layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .orientation import OrientationEmbedding
from .query_init import ChannelProjection, MultiScaleQueryInit, QueryInitState
from .types import (
    FeatureMap,
    FeaturePyramid,
    InstanceSet,
    ModelConfig,
    QuerySet,
    ShapeError,
    flatten_pixels,
    validate_pyramid,
)

# decoder cross-attention visits the enhanced levels coarse-to-fine
DECODER_LEVEL_STRIDES = (32, 16, 8)


def _norm(channels: int) -> nn.Module:
    groups = 8 if channels % 8 == 0 else 1
    return nn.GroupNorm(groups, channels)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.norm2 = _norm(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), _norm(out_ch)
            )
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        out = self.norm2(self.conv2(F.relu(self.norm1(self.conv1(x)))))
        return F.relu(out + self.skip(x))


class Backbone(nn.Module):
    """4-stage residual CNN; level widths (w, 2w, 4w, 8w) at strides 4/8/16/32.

    GroupNorm keeps every operation per-sample (batch-mappable) and
    deterministic, unlike batch statistics.
    """

    def __init__(self, width: int = 256, in_channels: int = 3):
        super().__init__()
        self.width = width
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, stride=2, padding=1, bias=False),
            _norm(width),
            nn.ReLU(inplace=True),
        )
        self.stage2 = ResidualBlock(width, width, stride=2)
        self.stage3 = ResidualBlock(width, 2 * width, stride=2)
        self.stage4 = ResidualBlock(2 * width, 4 * width, stride=2)
        self.stage5 = ResidualBlock(4 * width, 8 * width, stride=2)

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input size {h}x{w} must be divisible by 32")
        c2 = self.stage2(self.stem(image))
        c3 = self.stage3(c2)
        c4 = self.stage4(c3)
        c5 = self.stage5(c4)
        levels = tuple(
            FeatureMap(data=d, stride=s) for d, s in zip((c2, c3, c4, c5), (4, 8, 16, 32))
        )
        return validate_pyramid(
            FeaturePyramid(levels=levels, input_height=h, input_width=w),
            base_channels=self.width,
        )


@dataclass
class PixelDecoderOutput:
    """enhanced: maps at strides 8/16/32 (in that order); a2: the stride-4 map
    that skips top-down aggregation; per_pixel_embed: [B, D, H/4, W/4]."""

    enhanced: tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    a2: torch.Tensor
    per_pixel_embed: torch.Tensor

    def by_stride(self, stride: int) -> torch.Tensor:
        return self.enhanced[{8: 0, 16: 1, 32: 2}[stride]]


class PixelDecoder(nn.Module):
    """Conv refinement + top-down fusion over the projected/enhanced pyramid."""

    def __init__(self, embed_dim: int = 256, upsample_mode: str = "bilinear"):
        super().__init__()
        self.upsample_mode = upsample_mode
        self.refine = nn.ModuleList(
            nn.Conv2d(embed_dim, embed_dim, 3, padding=1) for _ in range(4)
        )
        self.out_conv = nn.Conv2d(embed_dim, embed_dim, 3, padding=1)

    def _up(self, x: torch.Tensor, size) -> torch.Tensor:
        if self.upsample_mode == "nearest":
            return F.interpolate(x, size=size, mode="nearest")
        return F.interpolate(x, size=size, mode=self.upsample_mode, align_corners=False)

    def forward(self, levels: Sequence[torch.Tensor]) -> PixelDecoderOutput:
        c2, c3, c4, c5 = levels
        e32 = self.refine[3](c5)
        e16 = self.refine[2](c4 + self._up(e32, c4.shape[-2:]))
        e8 = self.refine[1](c3 + self._up(e16, c3.shape[-2:]))
        a2 = self.refine[0](c2)
        per_pixel = self.out_conv(a2 + self._up(e8, c2.shape[-2:]))
        return PixelDecoderOutput(enhanced=(e8, e16, e32), a2=a2, per_pixel_embed=per_pixel)


class DecoderLayer(nn.Module):
    """Masked cross-attention, query self-attention, then a 2-layer FFN.

    `foreground` marks the pixels each query may attend to; a query whose
    foreground is empty falls back to full attention so the softmax stays
    well defined.
    """

    def __init__(self, embed_dim: int, num_heads: int, ffn_dim: int):
        super().__init__()
        self.num_heads = num_heads
        self.cross_attn = nn.MultiheadAttention(embed_dim, num_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(embed_dim)
        self.self_attn = nn.MultiheadAttention(embed_dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(embed_dim)
        self.ffn = nn.Sequential(
            nn.Linear(embed_dim, ffn_dim), nn.ReLU(inplace=True), nn.Linear(ffn_dim, embed_dim)
        )
        self.norm3 = nn.LayerNorm(embed_dim)

    def forward(
        self,
        queries: torch.Tensor,
        pixel_feats: torch.Tensor,
        foreground: Optional[torch.Tensor] = None,
        query_pos: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """queries [B,N,D], pixel_feats [B,L,D], foreground bool [B,N,L]."""
        block = None
        if foreground is not None:
            fg = foreground
            empty = ~fg.any(dim=-1, keepdim=True)  # [B,N,1]
            fg = fg | empty  # empty rows attend everywhere
            block = ~fg
            block = block.repeat_interleave(self.num_heads, dim=0)
        q = queries if query_pos is None else queries + query_pos
        attended, _ = self.cross_attn(q, pixel_feats, pixel_feats, attn_mask=block)
        x = self.norm1(queries + attended)
        qk = x if query_pos is None else x + query_pos
        self_out, _ = self.self_attn(qk, qk, x)
        x = self.norm2(x + self_out)
        return self.norm3(x + self.ffn(x))


class MLP(nn.Module):
    """Simple multi-layer perceptron with ReLU between layers."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, num_layers: int):
        super().__init__()
        dims = [in_dim] + [hidden_dim] * (num_layers - 1)
        self.layers = nn.ModuleList(
            nn.Linear(a, b) for a, b in zip(dims, dims[1:] + [out_dim])
        )

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


@dataclass
class DecoderLayerOutput:
    """Per-layer predictions.

    class_logits: [B, N_q, 2] (ship, no-object); mask_logits: [B, N_q, H/4, W/4];
    attention_mask: foreground bool [B, N_q, L] at the next level's resolution
    (True = the query may attend there), or None when no level follows.
    """

    class_logits: torch.Tensor
    mask_logits: torch.Tensor
    attention_mask: Optional[torch.Tensor]


class PredictionHeads(nn.Module):
    """Classification + mask heads shared across decoder layers."""

    def __init__(self, embed_dim: int, num_classes: int = 1):
        super().__init__()
        self.norm = nn.LayerNorm(embed_dim)
        self.class_embed = nn.Linear(embed_dim, num_classes + 1)
        self.mask_embed = MLP(embed_dim, embed_dim, embed_dim, 3)

    def forward(
        self,
        queries: torch.Tensor,
        per_pixel_embed: torch.Tensor,
        attn_target_size: Optional[tuple[int, int]] = None,
    ) -> DecoderLayerOutput:
        q = self.norm(queries if queries.dim() == 3 else queries.unsqueeze(0))
        class_logits = self.class_embed(q)
        embed = self.mask_embed(q)  # [B, N, D]
        mask_logits = torch.einsum("bqc,bchw->bqhw", embed, per_pixel_embed)
        foreground = None
        if attn_target_size is not None:
            resized = F.interpolate(
                mask_logits, size=attn_target_size, mode="bilinear", align_corners=False
            )
            foreground = (resized.sigmoid() > 0.5).flatten(2).detach()
        return DecoderLayerOutput(
            class_logits=class_logits, mask_logits=mask_logits, attention_mask=foreground
        )


@dataclass
class ModelOutputs:
    """Deep-supervision stack: one entry per decoder layer plus the
    pre-decoder prediction from the initial queries (first entry)."""

    layer_outputs: list[DecoderLayerOutput]
    query_state: Optional[QueryInitState]
    input_size: tuple[int, int]

    @property
    def final(self) -> DecoderLayerOutput:
        return self.layer_outputs[-1]


class ShipInstanceSegmenter(nn.Module):
    """Full query-based instance segmentation model."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w, d = config.backbone_width, config.embed_dim
        self.backbone = Backbone(w)
        self.projection = ChannelProjection([w, 2 * w, 4 * w, 8 * w], d)
        if config.use_orientation:
            self.orientation = nn.ModuleList(
                OrientationEmbedding(d, config.num_angles, config.orientation_activation)
                for _ in range(3)  # applied to projected C2, C3, C4; C5 bypasses
            )
        else:
            self.orientation = None
        if config.use_query_init:
            self.query_init = MultiScaleQueryInit(config.num_queries, d, eta=config.eta)
            self.static_queries = None
        else:
            self.query_init = None
            self.static_queries = nn.Parameter(torch.randn(config.num_queries, d) * 0.02)
        self.query_pos = nn.Parameter(torch.zeros(config.num_queries, d))
        self.level_embed = nn.Parameter(torch.randn(len(DECODER_LEVEL_STRIDES), d) * 0.02)
        self.pixel_decoder = PixelDecoder(d)
        self.decoder_layers = nn.ModuleList(
            DecoderLayer(d, config.num_heads, config.ffn_dim)
            for _ in range(config.decoder_layers)
        )
        self.heads = PredictionHeads(d, num_classes=1)

    def enhanced_levels(self, projected: list[torch.Tensor]) -> list[torch.Tensor]:
        """Orientation enhancement on C2..C4; C5 passes through unchanged."""
        if self.orientation is None:
            return list(projected)
        return [
            self.orientation[i](x) if i < 3 else x for i, x in enumerate(projected)
        ]

    def initial_queries(self, projected: list[torch.Tensor]) -> tuple[torch.Tensor, Optional[QueryInitState]]:
        batch = projected[0].shape[0]
        if self.query_init is not None:
            qset, state = self.query_init(projected)
            return qset.queries, state
        return self.static_queries.unsqueeze(0).expand(batch, -1, -1), None

    def forward(self, image: torch.Tensor) -> ModelOutputs:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        h, w = image.shape[-2:]
        pyramid = self.backbone(image)
        projected = self.projection(pyramid)
        queries, qstate = self.initial_queries(projected)
        enhanced = self.enhanced_levels(projected)
        pix = self.pixel_decoder(enhanced)

        feats, sizes = [], []
        for idx, stride in enumerate(DECODER_LEVEL_STRIDES):
            level = pix.by_stride(stride)
            sizes.append(level.shape[-2:])
            feats.append(flatten_pixels(level) + self.level_embed[idx])

        outputs = [self.heads(queries, pix.per_pixel_embed, attn_target_size=sizes[0])]
        q = queries
        query_pos = self.query_pos.unsqueeze(0)
        n_levels = len(DECODER_LEVEL_STRIDES)
        for i, layer in enumerate(self.decoder_layers):
            lvl = i % n_levels
            q = layer(q, feats[lvl], outputs[-1].attention_mask, query_pos)
            next_size = sizes[(i + 1) % n_levels]
            outputs.append(self.heads(q, pix.per_pixel_embed, attn_target_size=next_size))
        return ModelOutputs(layer_outputs=outputs, query_state=qstate, input_size=(h, w))

    @torch.no_grad()
    def predict(self, image: torch.Tensor, score_threshold: Optional[float] = None) -> InstanceSet:
        """Single-image inference: thresholded instances at input resolution."""
        if image.dim() == 4:
            if image.shape[0] != 1:
                raise ShapeError("predict expects a single image")
            image = image.squeeze(0)
        was_training = self.training
        self.eval()
        try:
            outputs = self.forward(image)
        finally:
            self.train(was_training)
        if score_threshold is None:
            score_threshold = self.config.score_threshold
        final = outputs.final
        masks, scores = self.candidate_masks(final, outputs.input_size)
        keep = scores > score_threshold
        return InstanceSet(
            masks=masks[0][keep[0]],
            labels=torch.zeros(int(keep[0].sum()), dtype=torch.long),
            scores=scores[0][keep[0]],
        )

    def candidate_masks(
        self, output: DecoderLayerOutput, input_size: tuple[int, int]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """All N_q binary masks at input resolution plus ship probabilities."""
        logits = F.interpolate(
            output.mask_logits, size=input_size, mode="bilinear", align_corners=False
        )
        masks = logits.sigmoid() > self.config.mask_threshold
        scores = output.class_logits.softmax(dim=-1)[..., 0]
        return masks, scores

    def visualization_features(self, image: torch.Tensor) -> dict[str, torch.Tensor]:
        """Projected C2 before and (when enabled) after orientation enhancement."""
        if image.dim() == 3:
            image = image.unsqueeze(0)
        projected = self.projection(self.backbone(image))
        feats = {"c2_projected": projected[0].detach()}
        if self.orientation is not None:
            feats["c2_enhanced"] = self.orientation[0](projected[0]).detach()
        return feats


def build_model(config: ModelConfig) -> ShipInstanceSegmenter:
    """Construct with weights drawn from the config seed (reproducible)."""
    torch.manual_seed(config.seed)
    return ShipInstanceSegmenter(config)


def _config_bytes(config: ModelConfig) -> np.ndarray:
    return np.frombuffer(json.dumps(config.to_dict(), sort_keys=True).encode(), dtype=np.uint8)


def save_checkpoint(
    path,
    model: ShipInstanceSegmenter,
    optimizer: Optional[torch.optim.Optimizer] = None,
    step: Optional[int] = None,
) -> None:
    """Write a single .npz archive.

    Layout: "config_json" (uint8-encoded JSON of the model config),
    "param/<name>" per state-dict entry, optional "step", optional optimizer
    state under "opt_state/<param-index>/<slot>" with param groups JSON in
    "opt_groups_json", and the torch RNG state in "torch_rng".
    """
    arrays: dict[str, np.ndarray] = {"config_json": _config_bytes(model.config)}
    for name, tensor in model.state_dict().items():
        arrays[f"param/{name}"] = tensor.detach().cpu().numpy()
    if step is not None:
        arrays["step"] = np.asarray(step, dtype=np.int64)
    if optimizer is not None:
        state = optimizer.state_dict()
        groups_json = json.dumps(state["param_groups"], sort_keys=True)
        arrays["opt_groups_json"] = np.frombuffer(groups_json.encode(), dtype=np.uint8)
        for idx, slots in state["state"].items():
            for slot, value in slots.items():
                v = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
                arrays[f"opt_state/{idx}/{slot}"] = v
    arrays["torch_rng"] = torch.get_rng_state().numpy()
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


@dataclass
class Checkpoint:
    config: ModelConfig
    state_dict: dict[str, torch.Tensor]
    step: Optional[int]
    opt_state: Optional[dict]
    torch_rng: Optional[torch.Tensor]


def load_checkpoint(path) -> Checkpoint:
    with np.load(path) as data:
        config = ModelConfig.from_dict(json.loads(bytes(data["config_json"]).decode()))
        state_dict = {
            k[len("param/"):]: torch.from_numpy(data[k].copy())
            for k in data.files
            if k.startswith("param/")
        }
        step = int(data["step"]) if "step" in data.files else None
        opt_state = None
        if "opt_groups_json" in data.files:
            groups = json.loads(bytes(data["opt_groups_json"]).decode())
            state: dict[int, dict] = {}
            for k in data.files:
                if not k.startswith("opt_state/"):
                    continue
                _, idx, slot = k.split("/", 2)
                entry = state.setdefault(int(idx), {})
                arr = data[k]
                entry[slot] = torch.from_numpy(arr.copy()) if arr.ndim else torch.tensor(arr)
            opt_state = {"state": state, "param_groups": groups}
        torch_rng = (
            torch.from_numpy(data["torch_rng"].copy()) if "torch_rng" in data.files else None
        )
    return Checkpoint(
        config=config, state_dict=state_dict, step=step, opt_state=opt_state, torch_rng=torch_rng
    )


def load_model(path) -> tuple[ShipInstanceSegmenter, Checkpoint]:
    ckpt = load_checkpoint(path)
    model = ShipInstanceSegmenter(ckpt.config)
    model.load_state_dict(ckpt.state_dict)
    return model, ckpt
