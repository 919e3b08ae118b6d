"""Experiment configuration: YAML/JSON files, profiles, validation.

A config file holds up to six sections::

    seed: 7                  # required (here or via --seed)
    profile: desk            # optional; --profile overrides
    scene: {...}             # SceneSpec fields (seed comes from the top level)
    dataset: {n_images, dir, train_fraction}
    model: {...}             # ModelConfig fields (seed comes from the top level)
    train: {...}             # TrainConfig fields
    eval: {buckets, score_threshold, split, oracle}

Profiles materialize defaults before the file's own sections are applied;
CLI flags (--seed/--out/--device/--profile) override last. Reports embed
the fully resolved config so every run is self-describing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .synthdata import SceneSpec
from .train import TrainConfig
from .types import ModelConfig

SECTIONS = ("seed", "profile", "scene", "dataset", "model", "train", "eval")
DATASET_KEYS = {"n_images": 16, "dir": "dataset", "train_fraction": 0.8}
EVAL_KEYS = {"buckets": "paper", "score_threshold": None, "split": "test", "oracle": False}

PROFILES: dict[str, dict] = {
    "desk": {
        "scene": {
            "image_size": 128,
            "ship_count": [1, 3],
            "length_range": [28.0, 64.0],
            "width_range": [10.0, 20.0],
        },
        "dataset": {"n_images": 8, "train_fraction": 1.0},
        "model": {"num_queries": 20, "decoder_layers": 3, "backbone_width": 32},
        "train": {
            "batch_size": 1,
            "epochs": 50,
            "lr_milestones": [30, 40],
            "random_flip": False,
            "random_scale": False,
            "random_crop": False,
        },
        "eval": {"split": "train"},
    },
    "paper": {
        "scene": {"image_size": 256},
        "dataset": {"n_images": 100, "train_fraction": 0.8},
        "model": {"num_queries": 100, "decoder_layers": 9, "backbone_width": 256},
        "train": {
            "batch_size": 8,
            "epochs": 500,
            "lr_milestones": [300, 400],
            "initial_lr": 1e-4,
        },
        "eval": {"split": "test"},
    },
}


class ConfigError(ValueError):
    """Invalid or missing configuration; maps to CLI exit code 2."""


@dataclass
class ResolvedConfig:
    seed: int
    profile: Optional[str]
    scene: SceneSpec
    model: ModelConfig
    train: TrainConfig
    dataset_dir: Path
    n_images: int
    train_fraction: float
    eval_options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "profile": self.profile,
            "scene": self.scene.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "dataset": {
                "n_images": self.n_images,
                "dir": str(self.dataset_dir),
                "train_fraction": self.train_fraction,
            },
            "eval": dict(self.eval_options),
        }


def load_config_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config {p}: {e}") from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config {p} must be a mapping, got {type(raw).__name__}")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    return raw


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    out.update(override or {})
    return out


def _section(raw: dict, profile_defaults: dict, name: str) -> dict:
    sec = raw.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"config section '{name}' must be a mapping")
    return _merge(profile_defaults.get(name, {}), sec)


def resolve_config(
    raw: dict,
    seed: Optional[int] = None,
    profile: Optional[str] = None,
    device: Optional[str] = None,
) -> ResolvedConfig:
    profile = profile or raw.get("profile")
    if profile is not None and profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    profile_defaults = PROFILES.get(profile, {}) if profile else {}

    if seed is None:
        seed = raw.get("seed")
    if seed is None:
        raise ConfigError("missing required key 'seed' (set it in the config or pass --seed)")
    if not isinstance(seed, int):
        raise ConfigError(f"'seed' must be an integer, got {seed!r}")

    try:
        scene = SceneSpec.from_dict(_merge(_section(raw, profile_defaults, "scene"), {"seed": seed}))
    except (ValueError, TypeError) as e:
        raise ConfigError(f"invalid scene config: {e}") from e
    try:
        model = ModelConfig.from_dict(_merge(_section(raw, profile_defaults, "model"), {"seed": seed}))
    except (ValueError, TypeError) as e:
        raise ConfigError(f"invalid model config: {e}") from e
    train_sec = _section(raw, profile_defaults, "train")
    if device is not None:
        train_sec["device"] = "cuda" if device == "gpu" else device
    try:
        train = TrainConfig.from_dict(train_sec)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"invalid train config: {e}") from e

    dataset_sec = _merge(DATASET_KEYS, _section(raw, profile_defaults, "dataset"))
    unknown = set(dataset_sec) - set(DATASET_KEYS)
    if unknown:
        raise ConfigError(f"unknown dataset config keys: {sorted(unknown)}")
    eval_sec = _merge(EVAL_KEYS, _section(raw, profile_defaults, "eval"))
    unknown = set(eval_sec) - set(EVAL_KEYS)
    if unknown:
        raise ConfigError(f"unknown eval config keys: {sorted(unknown)}")
    if eval_sec["buckets"] not in ("paper", "coco"):
        raise ConfigError(f"eval.buckets must be 'paper' or 'coco', got {eval_sec['buckets']!r}")

    return ResolvedConfig(
        seed=seed,
        profile=profile,
        scene=scene,
        model=model,
        train=train,
        dataset_dir=Path(dataset_sec["dir"]),
        n_images=int(dataset_sec["n_images"]),
        train_fraction=float(dataset_sec["train_fraction"]),
        eval_options=eval_sec,
    )
