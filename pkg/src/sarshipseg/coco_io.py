"""COCO-format annotation IO: RLE/polygon mask codecs and JSON files.

Masks are written as uncompressed COCO RLE (column-major pixel order,
counts alternating runs of 0s then 1s, starting with 0s), which round-trips
binary masks exactly. The reader additionally accepts polygon segmentations
so externally produced COCO datasets can be plugged in.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

SHIP_CATEGORY_ID = 1


def encode_rle(mask: np.ndarray) -> dict:
    """Binary [H, W] mask -> {"size": [H, W], "counts": [run lengths]}."""
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    h, w = mask.shape
    flat = np.asarray(mask, dtype=bool).flatten(order="F")
    counts = []
    prev, run = False, 0
    for v in flat:
        if v == prev:
            run += 1
        else:
            counts.append(run)
            prev, run = v, 1
    counts.append(run)
    return {"size": [int(h), int(w)], "counts": [int(c) for c in counts]}


def decode_rle(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos, val = 0, False
    for c in rle["counts"]:
        if val:
            flat[pos : pos + c] = True
        pos += c
        val = not val
    if pos != h * w:
        raise ValueError(f"RLE covers {pos} pixels, expected {h * w}")
    return flat.reshape((w, h)).T  # column-major order


def polygons_to_mask(polygons: list, height: int, width: int) -> np.ndarray:
    """Rasterize COCO polygon lists [[x0, y0, x1, y1, ...], ...] to a mask."""
    img = Image.new("1", (width, height), 0)
    draw = ImageDraw.Draw(img)
    for poly in polygons:
        pts = [(poly[i], poly[i + 1]) for i in range(0, len(poly), 2)]
        if len(pts) >= 3:
            draw.polygon(pts, outline=1, fill=1)
    return np.asarray(img, dtype=bool)


def segmentation_to_mask(seg, height: int, width: int) -> np.ndarray:
    """Decode either RLE (dict) or polygon (list of lists) segmentation."""
    if isinstance(seg, dict):
        return decode_rle(seg)
    return polygons_to_mask(seg, height, width)


def mask_bbox(mask: np.ndarray) -> list[float]:
    """COCO [x, y, w, h] bbox of a binary mask; zeros when empty."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return [0.0, 0.0, 0.0, 0.0]
    x0, x1 = xs.min(), xs.max()
    y0, y1 = ys.min(), ys.max()
    return [float(x0), float(y0), float(x1 - x0 + 1), float(y1 - y0 + 1)]


def write_json(path, payload) -> None:
    # insertion order is kept (deterministic) so report fields read naturally
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as e:
        raise FileNotFoundError(f"missing file: {path}") from e


def make_annotation(ann_id: int, image_id: int, mask: np.ndarray) -> dict:
    return {
        "id": int(ann_id),
        "image_id": int(image_id),
        "category_id": SHIP_CATEGORY_ID,
        "segmentation": encode_rle(mask),
        "area": float(mask.sum()),
        "bbox": mask_bbox(mask),
        "iscrowd": 0,
    }


def write_image_png(path, image01: np.ndarray) -> None:
    """[3, H, W] float image in [0, 1] -> 8-bit RGB PNG (deterministic)."""
    q = np.clip(np.round(image01 * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(np.transpose(q, (1, 2, 0)), mode="RGB").save(path)


def read_image_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.transpose(arr, (2, 0, 1))
