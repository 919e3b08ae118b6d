"""Deterministic synthetic SAR-like ship scenes with COCO annotations.

Scenes are built in reflectivity space: a dark sea background, bright
ship silhouettes (oriented rectangles with an elliptical bow taper), an
optional bright shoreline strip with clutter blobs along the bottom edge,
then multiplicative L-look speckle (gamma with unit mean, variance 1/L)
and clipping to [0, 1]. The single grayscale channel is replicated to RGB.

All randomness flows through the pinned portable PRNG (see rng.py), so a
(spec, seed) pair yields byte-identical images and annotations. Per-image
seeds are seed + image_index. When a spec enables the shoreline, odd image
indices become "inshore" scenes (shoreline present) and even indices stay
"offshore", so train/test splits contain both scene types.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from scipy.ndimage import binary_dilation

from . import coco_io
from .rng import PortableRng
from .types import InstanceSet

BACKGROUND_REFLECTIVITY = 0.06
SHORE_REFLECTIVITY = 0.30
SHIP_REFLECTIVITY = (0.55, 0.95)
CLUTTER_REFLECTIVITY = (0.40, 0.85)
MIN_MASK_AREA = 4
PLACEMENT_ATTEMPTS = 80
DENSE_GAP = 2  # px: dense mode keeps each new ship within this gap of the cluster


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 128
    ship_count: tuple[int, int] = (1, 4)
    length_range: tuple[float, float] = (18.0, 52.0)
    width_range: tuple[float, float] = (5.0, 14.0)
    orientation: Optional[float] = None  # None = uniform on [0, pi)
    min_separation: int = 2
    dense: bool = False
    speckle_looks: float = 4.0
    shoreline: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32, got {self.image_size}")
        lo, hi = self.ship_count
        if lo < 0 or hi < lo:
            raise ValueError(f"bad ship_count range {self.ship_count}")
        if self.speckle_looks <= 0:
            raise ValueError(f"speckle_looks must be > 0, got {self.speckle_looks}")
        if self.min_separation < 0:
            raise ValueError("min_separation must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("ship_count", "length_range", "width_range"):
            d[k] = list(d[k])
        return d

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        known = dict(d)
        unknown = set(known) - set(SceneSpec.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        for k in ("ship_count", "length_range", "width_range"):
            if k in known:
                known[k] = tuple(known[k])
        return SceneSpec(**known)


@dataclass
class Scene:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    instances: InstanceSet
    scene_type: str  # "inshore" | "offshore"
    seed: int


def rasterize_ship(
    cx: float, cy: float, length: float, width: float, angle: float, h: int, w: int
) -> np.ndarray:
    """Pixel-center point test for a hull rectangle plus half-ellipse bow."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    u = dx * cos_a + dy * sin_a
    v = -dx * sin_a + dy * cos_a
    bow = min(0.3 * length, length / 2.0)
    u_bow = length / 2.0 - bow
    half_w = width / 2.0
    hull = (u >= -length / 2.0) & (u <= u_bow) & (np.abs(v) <= half_w)
    taper = (u > u_bow) & (((u - u_bow) / bow) ** 2 + (v / half_w) ** 2 <= 1.0)
    return hull | taper


def _disk(radius: int) -> np.ndarray:
    if radius <= 0:
        return np.ones((1, 1), dtype=bool)
    r = int(radius)
    ys, xs = np.mgrid[-r : r + 1, -r : r + 1]
    return xs * xs + ys * ys <= r * r


def _place_ships(spec: SceneSpec, rng: PortableRng, water_rows: int) -> list[np.ndarray]:
    h = w = spec.image_size
    target = rng.randint(spec.ship_count[0], spec.ship_count[1] + 1)
    occupancy = np.zeros((h, w), dtype=bool)
    sep_structure = _disk(DENSE_GAP if spec.dense else spec.min_separation)
    masks: list[np.ndarray] = []
    centers: list[tuple[float, float]] = []
    for _ in range(target):
        placed = False
        for _attempt in range(PLACEMENT_ATTEMPTS):
            length = rng.uniform(low=spec.length_range[0], high=spec.length_range[1])
            width = rng.uniform(low=spec.width_range[0], high=spec.width_range[1])
            width = min(width, 0.7 * length)
            angle = (
                rng.uniform(low=0.0, high=math.pi)
                if spec.orientation is None
                else spec.orientation
            )
            margin = length / 2.0 + 2.0
            if 2 * margin >= min(w, water_rows):
                continue
            if spec.dense and centers:
                ax, ay = centers[rng.randint(0, len(centers))]
                radius = rng.uniform(low=0.3, high=1.0) * (length + width)
                phi = rng.uniform(low=0.0, high=2.0 * math.pi)
                cx = min(max(ax + radius * math.cos(phi), margin), w - margin)
                cy = min(max(ay + radius * math.sin(phi), margin), water_rows - margin)
            else:
                cx = rng.uniform(low=margin, high=w - margin)
                cy = rng.uniform(low=margin, high=water_rows - margin)
            mask = rasterize_ship(cx, cy, length, width, angle, h, w)
            if mask.sum() < MIN_MASK_AREA:
                continue
            if mask[water_rows:, :].any():
                continue
            if (mask & occupancy).any():
                continue
            if spec.dense:
                if masks:
                    near = binary_dilation(occupancy, structure=sep_structure)
                    if not (mask & near).any():
                        continue  # too far from the cluster
            else:
                grown = binary_dilation(mask, structure=sep_structure)
                if (grown & occupancy).any():
                    continue
            occupancy |= mask
            masks.append(mask)
            centers.append((cx, cy))
            placed = True
            break
        if not placed:
            continue  # bounded retries exhausted; scene carries fewer ships
    return masks


def generate_scene(spec: SceneSpec, seed: Optional[int] = None) -> Scene:
    """Fully determined by (spec, seed); see module docstring for the model."""
    scene_seed = spec.seed if seed is None else seed
    rng = PortableRng(scene_seed)
    h = w = spec.image_size

    reflectivity = np.full((h, w), BACKGROUND_REFLECTIVITY, dtype=np.float64)
    water_rows = h
    if spec.shoreline:
        strip = rng.randint(h // 8, h // 4 + 1)
        water_rows = h - strip
        reflectivity[water_rows:, :] = SHORE_REFLECTIVITY
        n_blobs = rng.randint(3, 9)
        for _ in range(n_blobs):
            bx = rng.uniform(low=0.0, high=float(w))
            by = rng.uniform(low=float(water_rows), high=float(h))
            ra = rng.uniform(low=2.0, high=7.0)
            rb = rng.uniform(low=2.0, high=7.0)
            amp = rng.uniform(low=CLUTTER_REFLECTIVITY[0], high=CLUTTER_REFLECTIVITY[1])
            ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
            blob = ((xs - bx) / ra) ** 2 + ((ys - by) / rb) ** 2 <= 1.0
            blob &= np.arange(h)[:, None] >= water_rows
            reflectivity[blob] = amp

    masks = _place_ships(spec, rng, water_rows)
    for mask in masks:
        amp = rng.uniform(low=SHIP_REFLECTIVITY[0], high=SHIP_REFLECTIVITY[1])
        reflectivity[mask] = amp

    speckle = rng.gamma(spec.speckle_looks, size=(h, w)) / spec.speckle_looks
    intensity = np.clip(reflectivity * speckle, 0.0, 1.0)
    image = np.repeat(intensity[None, :, :], 3, axis=0).astype(np.float32)

    if masks:
        stacked = torch.from_numpy(np.stack(masks))
    else:
        stacked = torch.zeros(0, h, w, dtype=torch.bool)
    instances = InstanceSet(masks=stacked, labels=torch.zeros(len(masks), dtype=torch.long))
    scene_type = "inshore" if spec.shoreline else "offshore"
    return Scene(image=image, instances=instances, scene_type=scene_type, seed=scene_seed)


def benchmark_spec(seed: int = 0) -> SceneSpec:
    """Spec whose 100-image dataset covers all three size buckets."""
    return SceneSpec(
        image_size=192,
        ship_count=(2, 5),
        length_range=(8.0, 150.0),
        width_range=(3.0, 42.0),
        shoreline=True,
        seed=seed,
    )


def generate_dataset(
    spec: SceneSpec, n_images: int, out_dir, train_fraction: float = 0.8
) -> dict:
    """Write PNGs, one COCO annotation JSON, and a split manifest.

    Image i uses seed spec.seed + i. Returns the manifest dict.
    """
    out = Path(out_dir)
    images_dir = out / "images"
    try:
        images_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {images_dir}: {e}") from e

    images, annotations = [], []
    splits: dict[str, list[int]] = {"train": [], "test": []}
    ann_id = 1
    # every k-th image goes to test, k chosen from the train fraction, so
    # small datasets and the inshore/offshore alternation stay balanced
    if train_fraction >= 1.0:
        test_stride = 0
    elif train_fraction <= 0.0:
        test_stride = 1
    else:
        test_stride = max(2, round(1.0 / (1.0 - train_fraction)))
    for i in range(n_images):
        scene_spec = replace(spec, shoreline=spec.shoreline and (i % 2 == 1))
        scene = generate_scene(scene_spec, seed=spec.seed + i)
        file_name = f"img_{i:05d}.png"
        try:
            coco_io.write_image_png(images_dir / file_name, scene.image)
        except OSError as e:
            raise OSError(f"cannot write {images_dir / file_name}: {e}") from e
        images.append(
            {
                "id": i,
                "file_name": f"images/{file_name}",
                "width": spec.image_size,
                "height": spec.image_size,
                "scene_type": scene.scene_type,
            }
        )
        for mask in scene.instances.masks:
            annotations.append(coco_io.make_annotation(ann_id, i, mask.numpy()))
            ann_id += 1
        if test_stride == 1:
            splits["test"].append(i)
        elif test_stride and i % test_stride == test_stride - 1:
            splits["test"].append(i)
        else:
            splits["train"].append(i)

    dataset = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": coco_io.SHIP_CATEGORY_ID, "name": "ship"}],
    }
    coco_io.write_json(out / "annotations.json", dataset)
    manifest = {
        "seed": spec.seed,
        "n_images": n_images,
        "spec": spec.to_dict(),
        "splits": splits,
    }
    coco_io.write_json(out / "manifest.json", manifest)
    return manifest


@dataclass
class DatasetRecord:
    image_id: int
    file_name: str
    scene_type: str
    split: str


class SyntheticDataset:
    """Reader for the on-disk layout written by generate_dataset.

    Also accepts externally produced COCO data (polygon or RLE masks) as
    long as the directory holds annotations.json and the referenced images;
    records without a manifest all land in the "train" split with scene
    type "offshore".
    """

    def __init__(self, root):
        self.root = Path(root)
        data = coco_io.read_json(self.root / "annotations.json")
        manifest_path = self.root / "manifest.json"
        manifest = coco_io.read_json(manifest_path) if manifest_path.exists() else None
        split_of = {}
        if manifest:
            for split, ids in manifest["splits"].items():
                for i in ids:
                    split_of[i] = split
        self.records = [
            DatasetRecord(
                image_id=img["id"],
                file_name=img["file_name"],
                scene_type=img.get("scene_type", "offshore"),
                split=split_of.get(img["id"], "train"),
            )
            for img in data["images"]
        ]
        self._sizes = {img["id"]: (img["height"], img["width"]) for img in data["images"]}
        self._anns: dict[int, list[dict]] = {}
        for ann in data["annotations"]:
            self._anns.setdefault(ann["image_id"], []).append(ann)
        self.manifest = manifest

    def __len__(self) -> int:
        return len(self.records)

    def ids(self, split: Optional[str] = None) -> list[int]:
        return [r.image_id for r in self.records if split is None or r.split == split]

    def record(self, image_id: int) -> DatasetRecord:
        for r in self.records:
            if r.image_id == image_id:
                return r
        raise KeyError(f"no image with id {image_id}")

    def load_image(self, image_id: int) -> torch.Tensor:
        rec = self.record(image_id)
        return torch.from_numpy(coco_io.read_image_png(self.root / rec.file_name))

    def load_instances(self, image_id: int) -> InstanceSet:
        h, w = self._sizes[image_id]
        anns = self._anns.get(image_id, [])
        if not anns:
            return InstanceSet.empty(h, w)
        masks = np.stack(
            [coco_io.segmentation_to_mask(a["segmentation"], h, w) for a in anns]
        )
        return InstanceSet(
            masks=torch.from_numpy(masks),
            labels=torch.zeros(len(anns), dtype=torch.long),
        )
