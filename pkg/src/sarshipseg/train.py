"""Config-driven training loop with multi-step LR schedule and resume.

Determinism contract: model weights come from the config seed; the batch
composition and augmentation draws for step k depend only on (seed, k), so
resuming from a checkpoint (weights + optimizer state) reproduces exactly
the trajectory of an uninterrupted single-threaded run. Loss components are
logged one CSV row per step with 10 significant digits.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .matching import DEFAULT_LOSS_WEIGHTS, total_loss
from .model import ShipInstanceSegmenter, build_model, load_checkpoint, save_checkpoint
from .synthdata import SyntheticDataset
from .types import InstanceSet, ModelConfig, ShapeError

LOSS_CSV_FIELDS = ("step", "epoch", "lr", "total", "classification", "mask_bce", "dice", "no_object")


class TrainingAborted(RuntimeError):
    """Raised when the loss goes non-finite; carries the offending batch."""

    def __init__(self, step: int, batch_ids: list[int]):
        super().__init__(
            f"non-finite loss at step {step} (batch image ids {batch_ids}); aborting"
        )
        self.step = step
        self.batch_ids = batch_ids


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 8
    initial_lr: float = 1e-4
    lr_milestones: tuple[int, ...] = (300, 400)
    lr_decay: float = 0.1
    weight_decay: float = 0.01
    random_flip: bool = True
    random_scale: bool = True
    scale_range: tuple[float, float] = (0.8, 1.2)
    random_crop: bool = True
    checkpoint_every: int = 0  # steps; 0 = final checkpoint only
    max_steps: Optional[int] = None
    device: str = "cpu"
    num_threads: Optional[int] = None
    loss_weights: tuple[float, float, float] = DEFAULT_LOSS_WEIGHTS
    no_object_weight: float = 1.0

    def __post_init__(self):
        ms = self.lr_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ShapeError(f"lr_milestones must be strictly increasing, got {ms}")
        if any(m >= self.epochs for m in ms):
            raise ShapeError(
                f"lr_milestones {ms} must all be below epochs {self.epochs}"
            )
        if self.epochs < 1 or self.batch_size < 1:
            raise ShapeError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["lr_milestones"] = list(self.lr_milestones)
        d["scale_range"] = list(self.scale_range)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = dict(d)
        unknown = set(known) - set(TrainConfig.__dataclass_fields__)
        if unknown:
            raise ShapeError(f"unknown train config keys: {sorted(unknown)}")
        for k in ("lr_milestones", "scale_range", "loss_weights"):
            if k in known:
                known[k] = tuple(known[k])
        return TrainConfig(**known)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    passed = sum(1 for m in cfg.lr_milestones if epoch >= m)
    return cfg.initial_lr * (cfg.lr_decay ** passed)


def _resize_pair(image: torch.Tensor, masks: torch.Tensor, size) -> tuple[torch.Tensor, torch.Tensor]:
    img = F.interpolate(image.unsqueeze(0), size=size, mode="bilinear", align_corners=False)
    if masks.shape[0]:
        msk = (
            F.interpolate(masks.float().unsqueeze(0), size=size, mode="nearest").squeeze(0) > 0.5
        )
    else:
        msk = torch.zeros(0, *size, dtype=torch.bool)
    return img.squeeze(0), msk


def augment_sample(
    image: torch.Tensor, gt: InstanceSet, cfg: TrainConfig, rnd: random.Random
) -> tuple[torch.Tensor, InstanceSet]:
    """Random flip + scale jitter with crop/pad back to the original size."""
    masks = gt.masks
    if cfg.random_flip and rnd.random() < 0.5:
        image = torch.flip(image, dims=(-1,))
        masks = torch.flip(masks, dims=(-1,)) if masks.shape[0] else masks
    if cfg.random_scale:
        h, w = image.shape[-2:]
        s = rnd.uniform(*cfg.scale_range)
        nh, nw = max(8, round(h * s)), max(8, round(w * s))
        image, masks = _resize_pair(image, masks, (nh, nw))
        if cfg.random_crop:
            if nh > h or nw > w:
                top = rnd.randint(0, max(0, nh - h))
                left = rnd.randint(0, max(0, nw - w))
                image = image[:, top : top + h, left : left + w]
                masks = masks[:, top : top + h, left : left + w] if masks.shape[0] else masks
            if nh < h or nw < w:
                top = rnd.randint(0, max(0, h - image.shape[-2]))
                left = rnd.randint(0, max(0, w - image.shape[-1]))
                canvas = torch.zeros(image.shape[0], h, w, dtype=image.dtype)
                canvas[:, top : top + image.shape[-2], left : left + image.shape[-1]] = image
                image = canvas
                if masks.shape[0]:
                    mcanvas = torch.zeros(masks.shape[0], h, w, dtype=torch.bool)
                    mcanvas[:, top : top + masks.shape[-2], left : left + masks.shape[-1]] = masks
                    masks = mcanvas
        else:
            image, masks = _resize_pair(image, masks, (h, w))
    if masks.shape[0]:
        keep = masks.flatten(1).any(dim=1)
        masks = masks[keep]
    gt = InstanceSet(masks=masks, labels=torch.zeros(masks.shape[0], dtype=torch.long))
    return image, gt


@dataclass
class TrainResult:
    steps: int
    final_loss: float
    csv_path: Path
    final_checkpoint: Path
    checkpoints: list[Path] = field(default_factory=list)


def _batch_indices(seed: int, step: int, n: int, batch_size: int) -> list[int]:
    rnd = random.Random((seed * 1_000_003) ^ (step * 7_368_787))
    if batch_size >= n:
        return list(range(n)) if batch_size == n else rnd.choices(range(n), k=batch_size)
    return rnd.sample(range(n), k=batch_size)


def _augment_rng(seed: int, step: int, slot: int) -> random.Random:
    return random.Random((seed * 69_069 + 1) ^ (step * 2_654_435_761) ^ (slot * 40_503))


def train_model(
    model_config: ModelConfig,
    train_config: TrainConfig,
    dataset: SyntheticDataset,
    out_dir,
    resume: Optional[str] = None,
    split: str = "train",
) -> TrainResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    if train_config.num_threads:
        torch.set_num_threads(train_config.num_threads)
    device = torch.device("cuda" if train_config.device == "gpu" else train_config.device)

    ids = dataset.ids(split)
    if not ids:
        raise FileNotFoundError(f"dataset has no images in split {split!r}")
    samples = [(dataset.load_image(i), dataset.load_instances(i), i) for i in ids]

    model = build_model(model_config).to(device)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=train_config.initial_lr, weight_decay=train_config.weight_decay
    )
    start_step = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.config != model_config:
            mismatched = [
                k
                for k in model_config.to_dict()
                if model_config.to_dict()[k] != ckpt.config.to_dict()[k]
            ]
            raise ShapeError(f"checkpoint/config mismatch on fields: {mismatched}")
        model.load_state_dict(ckpt.state_dict)
        if ckpt.opt_state is not None:
            optimizer.load_state_dict(ckpt.opt_state)
        if ckpt.torch_rng is not None:
            torch.set_rng_state(ckpt.torch_rng.to(torch.uint8))
        start_step = ckpt.step or 0

    n = len(samples)
    steps_per_epoch = max(1, math.ceil(n / train_config.batch_size))
    total_steps = train_config.epochs * steps_per_epoch
    if train_config.max_steps is not None:
        total_steps = min(total_steps, train_config.max_steps)

    csv_path = out / "loss_log.csv"
    mode = "a" if (resume is not None and csv_path.exists()) else "w"
    checkpoints: list[Path] = []
    final_loss = float("nan")
    with open(csv_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(LOSS_CSV_FIELDS)
        for step in range(start_step, total_steps):
            epoch = step // steps_per_epoch
            lr = lr_at_epoch(train_config, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr

            picks = _batch_indices(model_config.seed, step, n, train_config.batch_size)
            batch = []
            for slot, pick in enumerate(picks):
                image, gt, image_id = samples[pick]
                image, gt = augment_sample(image, gt, train_config, _augment_rng(model_config.seed, step, slot))
                batch.append((image, gt, image_id))

            images = torch.stack([b[0] for b in batch]).to(device)
            batch_ids = [b[2] for b in batch]
            try:
                outputs = model(images)
                loss = None
                reports = []
                for b, (_, gt, _) in enumerate(batch):
                    sample_loss, rep = total_loss(
                        outputs.layer_outputs,
                        gt,
                        weights=train_config.loss_weights,
                        no_object_weight=train_config.no_object_weight,
                        batch_index=b,
                    )
                    loss = sample_loss if loss is None else loss + sample_loss
                    reports.append(rep)
            except ShapeError as e:
                if "non-finite" in str(e):
                    raise TrainingAborted(step + 1, batch_ids) from e
                raise
            loss = loss / len(batch)

            if not torch.isfinite(loss):
                raise TrainingAborted(step + 1, batch_ids)

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            k = len(reports)
            final_loss = float(loss.detach())
            writer.writerow(
                [
                    step + 1,
                    epoch,
                    f"{lr:.10g}",
                    f"{final_loss:.10g}",
                    f"{sum(r.classification for r in reports) / k:.10g}",
                    f"{sum(r.mask_bce for r in reports) / k:.10g}",
                    f"{sum(r.dice for r in reports) / k:.10g}",
                    f"{sum(r.no_object for r in reports) / k:.10g}",
                ]
            )
            if train_config.checkpoint_every and (step + 1) % train_config.checkpoint_every == 0:
                path = ckpt_dir / f"step_{step + 1:06d}.npz"
                save_checkpoint(path, model, optimizer=optimizer, step=step + 1)
                checkpoints.append(path)

    final_path = out / "checkpoint_final.npz"
    save_checkpoint(final_path, model, optimizer=optimizer, step=total_steps)
    return TrainResult(
        steps=total_steps,
        final_loss=final_loss,
        csv_path=csv_path,
        final_checkpoint=final_path,
        checkpoints=checkpoints,
    )


def run_inference(
    model: ShipInstanceSegmenter,
    dataset: SyntheticDataset,
    image_ids: Sequence[int],
    oracle: bool = False,
    score_threshold: Optional[float] = None,
) -> dict[int, InstanceSet]:
    """Predictions per image id; oracle mode returns gt with unit scores."""
    preds = {}
    for i in image_ids:
        if oracle:
            gt = dataset.load_instances(i)
            preds[i] = InstanceSet(
                masks=gt.masks, labels=gt.labels, scores=torch.ones(len(gt))
            )
        else:
            preds[i] = model.predict(dataset.load_image(i), score_threshold=score_threshold)
    return preds
