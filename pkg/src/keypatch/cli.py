"""
Command line entry point.

    keypatch attack --images DIR --detector toy --detector toy --out DIR [options]
    keypatch score --clean DIR --adv DIR --detector toy --detector toy
    keypatch synth --out DIR [--n-images 20] [--seed 0]

Algorithm settings come from ``--config FILE`` (JSON with AttackConfig field
names) and then from flags; a flag that is given wins over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path
from typing import List, Optional

from keypatch import __version__
from keypatch.engine import INIT_METHODS
from keypatch.io import dump_json, load_dataset, write_png, write_voc_xml
from keypatch.types import AttackConfig

logger = logging.getLogger("keypatch")

# flag destination -> AttackConfig field
_CONFIG_FLAGS = {
    "iters": "max_iterations",
    "alpha": "alpha",
    "ak": "add_frequency",
    "dk": "decrease_threshold",
    "patch_size": "patch_size",
    "cell_size": "cell_size",
    "top_k": "top_k_cells",
    "max_patches": "max_patches",
    "p_limit": "p_limit",
    "region_limit": "region_limit",
    "grid_spacing": "grid_spacing",
    "seed": "seed",
    "block": "points_removal_block",
}


def _number(text: str) -> float:
    """Accepts ``0.03`` as well as fractions such as ``8/255``."""
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keypatch", description="Sparse key-pixel attacks on object detectors.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    attack = sub.add_parser("attack", help="attack every image in a directory")
    attack.add_argument("--images", required=True, type=Path)
    attack.add_argument("--annotations", type=Path)
    attack.add_argument("--detector", action="append", required=True, help="toy, toy:SEED, ext:CMD or ext")
    attack.add_argument("--out", required=True, type=Path)
    attack.add_argument("--config", type=Path, help="JSON file of AttackConfig fields")
    attack.add_argument("--iters", type=int)
    attack.add_argument("--alpha", type=_number)
    attack.add_argument("--ak", type=int)
    attack.add_argument("--dk", type=int)
    attack.add_argument("--patch-size", type=int)
    attack.add_argument("--cell-size", type=int)
    attack.add_argument("--top-k", type=int)
    attack.add_argument("--max-patches", type=int)
    attack.add_argument("--p-limit", type=_number)
    attack.add_argument("--region-limit", type=int)
    attack.add_argument("--grid-spacing", type=int)
    attack.add_argument("--block", type=int, help="points-removal block side")
    attack.add_argument("--init", choices=INIT_METHODS, default="gradient")
    attack.add_argument("--no-refine", action="store_true", help="disable patch adding and pruning")
    attack.add_argument("--no-points-removal", action="store_true")
    attack.add_argument("--seed", type=int)
    attack.add_argument("--workers", type=int, default=1)
    attack.add_argument("--resume", action="store_true")

    score = sub.add_parser("score", help="recompute scores from clean and adversarial PNGs")
    score.add_argument("--clean", required=True, type=Path)
    score.add_argument("--adv", required=True, type=Path)
    score.add_argument("--detector", action="append", required=True)
    score.add_argument("--annotations", type=Path)
    score.add_argument("--p-limit", type=_number, default=0.02)
    score.add_argument("--out", type=Path, help="write the JSON here instead of stdout")

    synth = sub.add_parser("synth", help="write a synthetic toy-detector scene suite")
    synth.add_argument("--out", required=True, type=Path)
    synth.add_argument("--n-images", type=int, default=20)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--detector", action="append", help="detectors whose templates are planted (default: toy toy)")
    return parser


def config_from_args(args: argparse.Namespace) -> AttackConfig:
    values = {}
    if args.config is not None:
        values = json.loads(Path(args.config).read_text())
        unknown = set(values) - set(AttackConfig().to_dict())
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for flag, name in _CONFIG_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[name] = value
    return AttackConfig(**values)


def _attack(args) -> int:
    from keypatch.runner import run_batch

    config = config_from_args(args)
    skipped: List[str] = []
    items = load_dataset(args.images, args.annotations, skipped)
    if not items:
        logger.warning("no images found in %s", args.images)
    report = run_batch(
        items,
        args.detector,
        config,
        args.out,
        init=args.init,
        refine=not args.no_refine,
        points_removal=not args.no_points_removal,
        workers=args.workers,
        resume=args.resume,
        skipped_inputs=skipped,
    )
    agg = json.loads(report.read_text())["aggregate"]
    print(
        f"{agg['images_done']}/{agg['images_total']} images attacked; "
        f"mean OS {agg['mean_os']:.4f}, missed detection rate {agg['missed_detection_rate']}"
    )
    print(f"report: {report}")
    return 0


def _score(args) -> int:
    from keypatch.runner import score_directories

    result = score_directories(args.clean, args.adv, args.detector, args.p_limit, args.annotations)
    text = dump_json(result)
    if args.out is not None:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _synth(args) -> int:
    from keypatch.runner import build_detectors
    from keypatch.scenes import make_suite

    detectors = build_detectors(args.detector or ["toy", "toy"])
    images_dir, ann_dir = args.out / "images", args.out / "annotations"
    images_dir.mkdir(parents=True, exist_ok=True)
    ann_dir.mkdir(parents=True, exist_ok=True)
    for image, truth in make_suite(detectors, args.n_images, seed=args.seed):
        write_png(image.pixels, images_dir / f"{image.id}.png")
        write_voc_xml(ann_dir / f"{image.id}.xml", f"{image.id}.png", image.pixels.shape, truth)
    print(f"wrote {args.n_images} scenes to {images_dir}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handlers = {"attack": _attack, "score": _score, "synth": _synth}
    try:
        return handlers[args.command](args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"keypatch: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
