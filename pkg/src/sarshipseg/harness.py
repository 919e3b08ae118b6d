"""Experiment orchestration: evaluation reports and the ablation grid.

Evaluation groups a dataset split by scene type (offshore / inshore via the
shoreline flag) and reports AP per group plus the pooled "all" group, as
both JSON (exactly the six AP fields per split) and a plain-text table.
The ablation grid trains and evaluates the four module combinations
{baseline, +query_init, +orientation, +full} under a shared seed and
identical schedule, emitting a comparison table, per-variant loss curves,
and the loss at step 500 for convergence inspection.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import replace
from pathlib import Path
from typing import Optional

import torch

from . import coco_io
from .config import ResolvedConfig
from .metrics import EvalReport, coco_summary, format_report_table
from .model import load_model
from .synthdata import SyntheticDataset
from .train import run_inference, train_model
from .types import InstanceSet, ShapeError

ABLATION_VARIANTS = (
    ("baseline", False, False),
    ("query_init", True, False),
    ("orientation", False, True),
    ("full", True, True),
)


def predictions_to_results(preds: dict[int, InstanceSet]) -> list[dict]:
    """Standard COCO results list: one entry per predicted instance."""
    results = []
    for image_id, inst in preds.items():
        for k in range(len(inst)):
            results.append(
                {
                    "image_id": int(image_id),
                    "category_id": coco_io.SHIP_CATEGORY_ID,
                    "segmentation": coco_io.encode_rle(inst.masks[k].numpy()),
                    "score": float(inst.scores[k]),
                }
            )
    return results


def results_to_predictions(results: list[dict], dataset: SyntheticDataset) -> dict[int, InstanceSet]:
    """Inverse of predictions_to_results for externally produced files."""
    by_image: dict[int, list[dict]] = {}
    for r in results:
        by_image.setdefault(r["image_id"], []).append(r)
    preds = {}
    for rec in dataset.records:
        h, w = dataset._sizes[rec.image_id]
        entries = by_image.get(rec.image_id, [])
        if entries:
            masks = torch.stack(
                [
                    torch.from_numpy(coco_io.segmentation_to_mask(e["segmentation"], h, w))
                    for e in entries
                ]
            )
            scores = torch.tensor([e["score"] for e in entries], dtype=torch.float32)
        else:
            masks = torch.zeros(0, h, w, dtype=torch.bool)
            scores = torch.zeros(0)
        preds[rec.image_id] = InstanceSet(
            masks=masks, labels=torch.zeros(len(entries), dtype=torch.long), scores=scores
        )
    return preds


def evaluate_predictions(
    preds: dict[int, InstanceSet],
    dataset: SyntheticDataset,
    image_ids: list[int],
    buckets: str = "paper",
) -> dict[str, EvalReport]:
    """Per-scene-type reports plus the pooled "all" report."""
    groups: dict[str, list[int]] = {"all": list(image_ids)}
    for i in image_ids:
        groups.setdefault(dataset.record(i).scene_type, []).append(i)
    reports = {}
    for name, ids in groups.items():
        if not ids:
            continue
        reports[name] = coco_summary(
            [preds[i] for i in ids],
            [dataset.load_instances(i) for i in ids],
            buckets=buckets,
        )
    return reports


def evaluate_checkpoint(
    checkpoint_path,
    dataset: SyntheticDataset,
    split: str,
    out_dir,
    resolved: Optional[ResolvedConfig] = None,
    oracle: bool = False,
    buckets: str = "paper",
    score_threshold: Optional[float] = None,
) -> dict:
    """Run inference on a split, write predictions + report files.

    Returns the report payload (also written to report.json/report.txt).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = dataset.ids(split)
    if not ids:
        raise FileNotFoundError(f"dataset split {split!r} is empty")

    model = None
    if not oracle:
        model, ckpt = load_model(checkpoint_path)
        model.eval()
        if resolved is not None and resolved.model != ckpt.config:
            mismatched = sorted(
                k
                for k, v in resolved.model.to_dict().items()
                if ckpt.config.to_dict()[k] != v
            )
            raise ShapeError(f"checkpoint/config mismatch on fields: {mismatched}")

    preds = run_inference(model, dataset, ids, oracle=oracle, score_threshold=score_threshold)
    coco_io.write_json(out / "predictions.json", predictions_to_results(preds))
    reports = evaluate_predictions(preds, dataset, ids, buckets=buckets)

    payload = {
        "split": split,
        "oracle": oracle,
        "checkpoint": None if oracle else str(checkpoint_path),
        "splits": {name: rep.to_json_dict() for name, rep in reports.items()},
        "config": resolved.to_dict() if resolved is not None else None,
    }
    coco_io.write_json(out / "report.json", payload)
    (out / "report.txt").write_text(format_report_table(reports) + "\n")
    return payload


def loss_at_step(csv_path, step: int) -> Optional[float]:
    with open(csv_path) as fh:
        for row in csv.DictReader(fh):
            if int(row["step"]) == step:
                return float(row["total"])
    return None


def config_hash(model_config_dict: dict) -> str:
    return hashlib.sha256(
        json.dumps(model_config_dict, sort_keys=True).encode()
    ).hexdigest()[:16]


def run_ablation(resolved: ResolvedConfig, out_dir) -> dict:
    """Train + evaluate the 4-variant module grid with a shared seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = SyntheticDataset(resolved.dataset_dir)
    eval_split = resolved.eval_options.get("split", "test")
    variants = []
    for name, use_qi, use_orient in ABLATION_VARIANTS:
        variant_cfg = replace(resolved.model, use_query_init=use_qi, use_orientation=use_orient)
        variant_dir = out / name
        result = train_model(variant_cfg, resolved.train, dataset, variant_dir)
        report = evaluate_checkpoint(
            result.final_checkpoint,
            dataset,
            eval_split,
            variant_dir / "eval",
            buckets=resolved.eval_options.get("buckets", "paper"),
            score_threshold=resolved.eval_options.get("score_threshold"),
        )
        variants.append(
            {
                "name": name,
                "use_query_init": use_qi,
                "use_orientation": use_orient,
                "model_config": variant_cfg.to_dict(),
                "config_hash": config_hash(variant_cfg.to_dict()),
                "steps": result.steps,
                "final_loss": result.final_loss,
                "loss_at_step_500": loss_at_step(result.csv_path, 500),
                "loss_csv": str(result.csv_path),
                "metrics": report["splits"],
            }
        )

    payload = {"variants": variants, "eval_split": eval_split, "config": resolved.to_dict()}
    coco_io.write_json(out / "ablation_report.json", payload)

    lines = [
        f"{'variant':<12} {'qinit':<6} {'orient':<7} {'loss@500':>10} {'final':>10}  AP_m by split"
    ]
    for v in variants:
        at500 = f"{v['loss_at_step_500']:.4f}" if v["loss_at_step_500"] is not None else "n/a"
        aps = "  ".join(
            f"{split}={m['AP_m']:.4f}" if m["AP_m"] is not None else f"{split}=undef"
            for split, m in v["metrics"].items()
        )
        lines.append(
            f"{v['name']:<12} {str(v['use_query_init']):<6} {str(v['use_orientation']):<7} "
            f"{at500:>10} {v['final_loss']:>10.4f}  {aps}"
        )
    (out / "ablation_report.txt").write_text("\n".join(lines) + "\n")
    return payload
