"""Mask AP evaluation in the MS COCO style.

AP_m averages over IoU thresholds 0.50:0.05:0.95; AP50/AP75 are the single
thresholds; size buckets follow the non-standard boundaries used for the
SAR ship benchmarks (large starts at 64^2 rather than COCO's 96^2), with a
flag to switch to standard COCO buckets for cross-checks.

Bucket conventions (documented tie-breaks for the open boundary cases):
small is area < 32^2, medium is 32^2 <= area < 64^2, large is area >= 64^2.
Bucket AP keeps only ground truths whose pixel area falls in the bucket and
pre-filters predictions by their own mask area before matching. A bucket
with no ground truth reports None ("undefined").

Matching is greedy per image: predictions in descending score order (ties
broken by stable input order) each take the highest-IoU still-unmatched
ground truth with IoU >= threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .types import InstanceSet, ShapeError

IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2).tolist())
RECALL_POINTS = np.linspace(0.0, 1.0, 101)

PAPER_BUCKETS = {
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 64.0 ** 2),
    "large": (64.0 ** 2, math.inf),
}
COCO_BUCKETS = {
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, math.inf),
}


def mask_iou(a: torch.Tensor, b: torch.Tensor) -> float:
    """Intersection over union of two binary masks; both empty -> 0."""
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    a = a.bool()
    b = b.bool()
    inter = (a & b).sum().item()
    union = (a | b).sum().item()
    return inter / union if union > 0 else 0.0


def pairwise_iou(preds: torch.Tensor, gts: torch.Tensor) -> np.ndarray:
    """IoU matrix [N_pred, N_gt] for stacked binary masks of one shape."""
    n, m = preds.shape[0], gts.shape[0]
    if n == 0 or m == 0:
        return np.zeros((n, m))
    p = preds.reshape(n, -1).double()
    g = gts.reshape(m, -1).double()
    inter = (p @ g.T).numpy()
    areas_p = p.sum(dim=1).numpy()[:, None]
    areas_g = g.sum(dim=1).numpy()[None, :]
    union = areas_p + areas_g - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


@dataclass
class MatchResult:
    """Per-prediction TP flags (input order) and the unmatched-gt count."""

    tp: np.ndarray  # bool [N_pred]
    matched_gt: np.ndarray  # int [N_pred], -1 where FP
    fn: int


def match_at_threshold(preds: InstanceSet, gts: InstanceSet, threshold: float) -> MatchResult:
    """Greedy matching at one IoU threshold (see module docstring)."""
    if preds.scores is None:
        raise ShapeError("predictions must carry scores")
    n, m = len(preds), len(gts)
    tp = np.zeros(n, dtype=bool)
    matched_gt = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return MatchResult(tp=tp, matched_gt=matched_gt, fn=m)
    iou = pairwise_iou(preds.masks, gts.masks)
    order = np.argsort(-preds.scores.numpy(), kind="stable")
    taken = np.zeros(m, dtype=bool)
    for p in order:
        best, best_iou = -1, threshold
        for g in range(m):
            if taken[g]:
                continue
            if iou[p, g] >= best_iou and (best == -1 or iou[p, g] > best_iou):
                best, best_iou = g, iou[p, g]
        if best >= 0:
            tp[p] = True
            matched_gt[p] = best
            taken[best] = True
    return MatchResult(tp=tp, matched_gt=matched_gt, fn=int(m - taken.sum()))


def precision_recall_curve(
    tp_flags: np.ndarray, scores: np.ndarray, num_gt: int
) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative precision/recall in descending score order (stable ties)."""
    order = np.argsort(-scores, kind="stable")
    tp = tp_flags[order].astype(np.float64)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / num_gt if num_gt > 0 else np.zeros_like(cum_tp)
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1.0)
    return precision, recall


def average_precision(tp_flags: np.ndarray, scores: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP over the monotone precision envelope."""
    if num_gt == 0:
        raise ShapeError("AP undefined with zero ground truths")
    if len(tp_flags) == 0:
        return 0.0
    precision, recall = precision_recall_curve(tp_flags, scores, num_gt)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    p_at_r = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(p_at_r.mean())


@dataclass
class EvalReport:
    """AP summary; None marks a bucket with no ground truth ("undefined")."""

    ap: Optional[float]
    ap50: Optional[float]
    ap75: Optional[float]
    ap_small: Optional[float]
    ap_medium: Optional[float]
    ap_large: Optional[float]
    curves: dict = field(default_factory=dict)  # threshold -> (precision, recall)

    def to_json_dict(self) -> dict:
        return {
            "AP_m": self.ap,
            "AP50": self.ap50,
            "AP75": self.ap75,
            "AP_S": self.ap_small,
            "AP_M": self.ap_medium,
            "AP_L": self.ap_large,
        }


def _restrict_by_area(inst: InstanceSet, lo: float, hi: float) -> InstanceSet:
    areas = inst.areas().double()
    keep = (areas >= lo) & (areas < hi)
    return InstanceSet(
        masks=inst.masks[keep],
        labels=inst.labels[keep],
        scores=None if inst.scores is None else inst.scores[keep],
    )


def _ap_over_thresholds(
    preds: Sequence[InstanceSet],
    gts: Sequence[InstanceSet],
    thresholds: Sequence[float],
) -> tuple[Optional[dict], dict]:
    """Pooled-over-images AP per threshold; None when no gt at all."""
    num_gt = sum(len(g) for g in gts)
    if num_gt == 0:
        return None, {}
    aps, curves = {}, {}
    for t in thresholds:
        flags, scores = [], []
        for p, g in zip(preds, gts):
            res = match_at_threshold(p, g, t)
            flags.append(res.tp)
            scores.append(p.scores.numpy() if len(p) else np.zeros(0))
        flags = np.concatenate(flags) if flags else np.zeros(0, dtype=bool)
        scores = np.concatenate(scores) if scores else np.zeros(0)
        aps[t] = average_precision(flags, scores, num_gt)
        curves[t] = precision_recall_curve(flags, scores, num_gt)
    return aps, curves


def coco_summary(
    preds: Sequence[InstanceSet],
    gts: Sequence[InstanceSet],
    buckets: str = "paper",
) -> EvalReport:
    """Dataset-level AP report; `buckets` selects "paper" or "coco" areas."""
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} prediction sets vs {len(gts)} gt sets")
    bucket_defs = PAPER_BUCKETS if buckets == "paper" else COCO_BUCKETS

    overall, curves = _ap_over_thresholds(preds, gts, IOU_THRESHOLDS)
    if overall is None:
        return EvalReport(None, None, None, None, None, None)
    ap = float(np.mean(list(overall.values())))
    ap50 = overall[0.5]
    ap75 = overall[0.75]

    bucket_ap: dict[str, Optional[float]] = {}
    for name, (lo, hi) in bucket_defs.items():
        b_gts = [_restrict_by_area(g, lo, hi) for g in gts]
        b_preds = [_restrict_by_area(p, lo, hi) for p in preds]
        b_overall, _ = _ap_over_thresholds(b_preds, b_gts, IOU_THRESHOLDS)
        bucket_ap[name] = None if b_overall is None else float(np.mean(list(b_overall.values())))

    return EvalReport(
        ap=ap,
        ap50=ap50,
        ap75=ap75,
        ap_small=bucket_ap["small"],
        ap_medium=bucket_ap["medium"],
        ap_large=bucket_ap["large"],
        curves=curves,
    )


def format_report_table(reports: dict[str, EvalReport]) -> str:
    """Plain-text table, one row per split."""
    cols = ("AP_m", "AP50", "AP75", "AP_S", "AP_M", "AP_L")
    lines = ["split      " + "  ".join(f"{c:>9}" for c in cols)]
    for split, rep in reports.items():
        vals = rep.to_json_dict()
        cells = [
            f"{vals[c]:9.4f}" if vals[c] is not None else f"{'undefined':>9}" for c in cols
        ]
        lines.append(f"{split:<11}" + "  ".join(cells))
    return "\n".join(lines)
