"""Hungarian set matching and the training loss.

Predictions are matched to ground-truth instances per decoder layer by
minimum-cost bipartite assignment over a weighted combination of
classification, mask BCE, and soft-dice costs. The loss then applies
cross-entropy / BCE / dice on the matched pairs and no-object
cross-entropy on the unmatched queries, summed over all supervised layers.
Mask terms are evaluated at the mask-logit resolution (stride 4), with
ground truth downsampled by nearest neighbor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .types import InstanceSet, ShapeError

DEFAULT_LOSS_WEIGHTS = (2.0, 5.0, 5.0)  # (classification, mask BCE, dice)
DICE_EPS = 1.0
SHIP_CLASS = 0
NO_OBJECT_CLASS = 1


def hungarian_match(costs) -> list[tuple[int, int]]:
    """Minimum-total-cost assignment; returns min(n, m) (row, col) pairs."""
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2:
        raise ShapeError(f"cost matrix must be 2-D, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise ShapeError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(c)
    return list(zip(rows.tolist(), cols.tolist()))


def soft_dice(p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """1 - 2*sum(p*g) / (sum(p) + sum(g) + 1), with both-empty defined as 0."""
    inter = (p * g).sum()
    denom = p.sum() + g.sum()
    if denom == 0:
        return torch.zeros((), dtype=p.dtype, device=p.device)
    return 1.0 - 2.0 * inter / (denom + DICE_EPS)


def pair_cost(
    class_logits: torch.Tensor,
    mask_logits: torch.Tensor,
    gt_label: int,
    gt_mask: torch.Tensor,
) -> tuple[float, float, float]:
    """Cost components for one (prediction, ground truth) pair.

    cls = -prob(gt class); bce = mean pixel BCE of sigmoid(mask_logits) vs
    the mask; dice = soft dice as in soft_dice. The gt mask must already be
    at the mask-logit resolution.
    """
    if gt_mask.shape != mask_logits.shape:
        raise ShapeError(
            f"gt mask {tuple(gt_mask.shape)} must match mask logits "
            f"{tuple(mask_logits.shape)}"
        )
    prob = class_logits.softmax(dim=-1)[gt_label]
    g = gt_mask.to(mask_logits.dtype)
    bce = F.binary_cross_entropy_with_logits(mask_logits, g, reduction="mean")
    dice = soft_dice(mask_logits.sigmoid(), g)
    return (-float(prob), float(bce), float(dice))


@dataclass
class CostMatrix:
    """Weighted total costs [N_q, N_gt] plus the per-entry components."""

    costs: torch.Tensor
    cls: torch.Tensor
    bce: torch.Tensor
    dice: torch.Tensor


def build_cost_matrix(
    class_logits: torch.Tensor,
    mask_logits: torch.Tensor,
    gt_labels: torch.Tensor,
    gt_masks: torch.Tensor,
    weights: Sequence[float] = DEFAULT_LOSS_WEIGHTS,
) -> CostMatrix:
    """Vectorized pair costs for one image.

    class_logits [N, 2], mask_logits [N, h, w], gt_labels [M],
    gt_masks [M, h, w] (already at logit resolution).
    """
    n = class_logits.shape[0]
    m = gt_labels.shape[0]
    probs = class_logits.softmax(dim=-1)  # [N, 2]
    cls = -probs[:, gt_labels]  # [N, M]

    logits_flat = mask_logits.reshape(n, -1)
    g = gt_masks.to(mask_logits.dtype).reshape(m, -1)
    hw = logits_flat.shape[1]
    pos = F.binary_cross_entropy_with_logits(
        logits_flat, torch.ones_like(logits_flat), reduction="none"
    )
    neg = F.binary_cross_entropy_with_logits(
        logits_flat, torch.zeros_like(logits_flat), reduction="none"
    )
    bce = (pos @ g.T + neg @ (1.0 - g).T) / hw  # [N, M]

    p = logits_flat.sigmoid()
    inter = p @ g.T
    denom = p.sum(dim=1, keepdim=True) + g.sum(dim=1)  # [N, M]
    dice = torch.where(
        denom == 0, torch.zeros_like(inter), 1.0 - 2.0 * inter / (denom + DICE_EPS)
    )

    w_cls, w_bce, w_dice = weights
    total = w_cls * cls + w_bce * bce + w_dice * dice
    return CostMatrix(costs=total, cls=cls, bce=bce, dice=dice)


def downsample_masks(masks: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbor downsample of binary [M, H, W] masks to `size`."""
    if masks.shape[0] == 0:
        return torch.zeros(0, *size, dtype=torch.bool, device=masks.device)
    out = F.interpolate(masks.float().unsqueeze(0), size=size, mode="nearest")
    return out.squeeze(0) > 0.5


@dataclass
class LossReport:
    total: float
    classification: float
    mask_bce: float
    dice: float
    no_object: float
    num_matched: int


def layer_loss(
    class_logits: torch.Tensor,
    mask_logits: torch.Tensor,
    gt: InstanceSet,
    weights: Sequence[float] = DEFAULT_LOSS_WEIGHTS,
    no_object_weight: float = 1.0,
) -> tuple[torch.Tensor, LossReport]:
    """Matched-pair loss for one layer of one image (unbatched inputs)."""
    w_cls, w_bce, w_dice = weights
    n = class_logits.shape[0]
    device = class_logits.device
    m = len(gt)
    if m == 0:
        targets = torch.full((n,), NO_OBJECT_CLASS, dtype=torch.long, device=device)
        no_obj = F.cross_entropy(class_logits, targets, reduction="sum") * no_object_weight
        val = float(no_obj.detach())
        report = LossReport(val, 0.0, 0.0, 0.0, val, 0)
        return no_obj, report

    gt_small = downsample_masks(gt.masks, mask_logits.shape[-2:]).to(device)
    cm = build_cost_matrix(class_logits, mask_logits, gt.labels.to(device), gt_small, weights)
    pairs = hungarian_match(cm.costs.detach().cpu().numpy())

    targets = torch.full((n,), NO_OBJECT_CLASS, dtype=torch.long, device=device)
    for r, c in pairs:
        targets[r] = int(gt.labels[c])
    ce_all = F.cross_entropy(class_logits, targets, reduction="none")
    matched_rows = torch.tensor([r for r, _ in pairs], dtype=torch.long, device=device)
    matched_mask = torch.zeros(n, dtype=torch.bool, device=device)
    matched_mask[matched_rows] = True

    cls_term = w_cls * ce_all[matched_mask].sum()
    no_obj_term = no_object_weight * ce_all[~matched_mask].sum()

    bce_term = class_logits.new_zeros(())
    dice_term = class_logits.new_zeros(())
    for r, c in pairs:
        g = gt_small[c].to(mask_logits.dtype)
        bce_term = bce_term + F.binary_cross_entropy_with_logits(
            mask_logits[r], g, reduction="mean"
        )
        dice_term = dice_term + soft_dice(mask_logits[r].sigmoid(), g)
    bce_term = w_bce * bce_term
    dice_term = w_dice * dice_term

    total = cls_term + bce_term + dice_term + no_obj_term
    report = LossReport(
        total=float(total.detach()),
        classification=float(cls_term.detach()),
        mask_bce=float(bce_term.detach()),
        dice=float(dice_term.detach()),
        no_object=float(no_obj_term.detach()),
        num_matched=len(pairs),
    )
    return total, report


def total_loss(
    layer_outputs,
    gt: InstanceSet,
    weights: Sequence[float] = DEFAULT_LOSS_WEIGHTS,
    no_object_weight: float = 1.0,
    batch_index: int = 0,
) -> tuple[torch.Tensor, LossReport]:
    """Deep-supervision loss: every layer's prediction is matched and scored."""
    total = None
    agg = LossReport(0.0, 0.0, 0.0, 0.0, 0.0, 0)
    for out in layer_outputs:
        cl = out.class_logits[batch_index] if out.class_logits.dim() == 3 else out.class_logits
        ml = out.mask_logits[batch_index] if out.mask_logits.dim() == 4 else out.mask_logits
        layer_total, rep = layer_loss(cl, ml, gt, weights, no_object_weight)
        total = layer_total if total is None else total + layer_total
        agg = LossReport(
            total=agg.total + rep.total,
            classification=agg.classification + rep.classification,
            mask_bce=agg.mask_bce + rep.mask_bce,
            dice=agg.dice + rep.dice,
            no_object=agg.no_object + rep.no_object,
            num_matched=agg.num_matched + rep.num_matched,
        )
    return total, agg
