"""Command-line interface.

Subcommands: generate, train, eval, ablate, visualize. Exit codes: 0 on
success, 1 on runtime failure (missing data, non-finite loss, IO), 2 on
configuration errors (argparse also exits 2 on bad arguments).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, load_config_file, resolve_config
from .types import ShapeError


def _add_common(p: argparse.ArgumentParser, needs_config: bool = True):
    p.add_argument("--config", required=needs_config, help="path to YAML/JSON config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--device", choices=("cpu", "gpu"), default=None)
    p.add_argument("--profile", choices=("desk", "paper"), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sarshipseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    _add_common(p)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    _add_common(p)
    p.add_argument("--resume", default=None, help="checkpoint .npz to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_common(p)
    p.add_argument("--checkpoint", default=None, help="model checkpoint .npz")
    p.add_argument("--split", default=None, help="dataset split (train/test)")
    p.add_argument(
        "--oracle", action="store_true", help="score ground truth against itself"
    )

    p = sub.add_parser("ablate", help="train/evaluate the 4-variant module grid")
    _add_common(p)

    p = sub.add_parser("visualize", help="emit C2 feature heatmaps")
    _add_common(p, needs_config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="input PNG")
    p.add_argument("--baseline-checkpoint", default=None)

    return parser


def _resolved(args):
    raw = load_config_file(args.config)
    return resolve_config(raw, seed=args.seed, profile=args.profile, device=args.device)


def cmd_generate(args) -> int:
    from .synthdata import generate_dataset

    resolved = _resolved(args)
    out = Path(args.out) if args.out else resolved.dataset_dir
    manifest = generate_dataset(
        resolved.scene, resolved.n_images, out, train_fraction=resolved.train_fraction
    )
    print(f"wrote {manifest['n_images']} images to {out}")
    return 0


def cmd_train(args) -> int:
    from .synthdata import SyntheticDataset
    from .train import train_model

    resolved = _resolved(args)
    if not (resolved.dataset_dir / "annotations.json").exists():
        print(f"error: dataset not found at {resolved.dataset_dir}", file=sys.stderr)
        return 1
    dataset = SyntheticDataset(resolved.dataset_dir)
    out = Path(args.out) if args.out else Path("runs") / "train"
    result = train_model(
        resolved.model, resolved.train, dataset, out, resume=args.resume
    )
    print(
        f"trained {result.steps} steps, final loss {result.final_loss:.4f}, "
        f"checkpoint {result.final_checkpoint}"
    )
    return 0


def cmd_eval(args) -> int:
    from .harness import evaluate_checkpoint
    from .synthdata import SyntheticDataset

    resolved = _resolved(args)
    if not (resolved.dataset_dir / "annotations.json").exists():
        print(f"error: dataset not found at {resolved.dataset_dir}", file=sys.stderr)
        return 1
    if not args.oracle and args.checkpoint is None:
        raise ConfigError("eval needs --checkpoint (or --oracle)")
    dataset = SyntheticDataset(resolved.dataset_dir)
    split = args.split or resolved.eval_options.get("split", "test")
    out = Path(args.out) if args.out else Path("runs") / "eval"
    payload = evaluate_checkpoint(
        args.checkpoint,
        dataset,
        split,
        out,
        resolved=resolved,
        oracle=args.oracle or resolved.eval_options.get("oracle", False),
        buckets=resolved.eval_options.get("buckets", "paper"),
        score_threshold=resolved.eval_options.get("score_threshold"),
    )
    print((out / "report.txt").read_text())
    print(f"report written to {out / 'report.json'}")
    return 0


def cmd_ablate(args) -> int:
    from .harness import run_ablation
    from .synthdata import SyntheticDataset  # noqa: F401  (import check before work)

    resolved = _resolved(args)
    if not (resolved.dataset_dir / "annotations.json").exists():
        print(f"error: dataset not found at {resolved.dataset_dir}", file=sys.stderr)
        return 1
    out = Path(args.out) if args.out else Path("runs") / "ablation"
    run_ablation(resolved, out)
    print((out / "ablation_report.txt").read_text())
    return 0


def cmd_visualize(args) -> int:
    from .visualize import visualize_checkpoint

    out = Path(args.out) if args.out else Path("runs") / "visualize"
    written = visualize_checkpoint(
        args.checkpoint, args.image, out, baseline_checkpoint=args.baseline_checkpoint
    )
    for p in written:
        print(f"wrote {p}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "visualize": cmd_visualize,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, OSError, RuntimeError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
