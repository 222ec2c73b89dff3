"""Command line for the export tools.

    fpss-export features --backbone grid-stats --image a.pgm b.pgm --out DIR
    fpss-export tp --model threshold-seg --image a.pgm \
        --class "1=fire hydrant" --out DIR
    fpss-export bank --generator everything-thresh --image a.pgm --out DIR

Exit codes: 0 success, 2 bad configuration or usage, 3 missing input
file, 4 backbone or model failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .backbones import BackboneUnavailable
from .jobs import PROMPT_TEMPLATE, ExportJob, export_bank, export_features, export_tp_outputs

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_BACKBONE = 4


def _image_pairs(paths: list[str]) -> list[tuple[str, Path]]:
    pairs = []
    for raw in paths:
        path = Path(raw)
        if not path.is_file():
            raise FileNotFoundError(f"image file not found: {path}")
        pairs.append((path.stem, path))
    return pairs


def _class_map(specs: list[str]) -> dict[str, str]:
    classes = {}
    for spec in specs:
        class_id, sep, name = spec.partition("=")
        if not sep or not class_id or not name:
            raise ValueError(f"--class wants ID=NAME, got {spec!r}")
        if class_id in classes:
            raise ValueError(f"repeated class id {class_id!r}")
        classes[class_id] = name
    return classes


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fpss-export",
        description="Serialize backbone outputs into FPSS tensor and mask files",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    features = sub.add_parser("features", help="export (H, W, D) feature tensors")
    features.add_argument("--backbone", default="grid-stats",
                          help="feature backbone identifier")
    features.add_argument("--image", nargs="+", required=True,
                          help="input images (binary PGM); id = file stem")
    features.add_argument("--out", required=True, help="output directory")
    features.add_argument("--patch", type=int, default=4, help="patch size in pixels")
    features.add_argument("--depth", type=int, default=16,
                          help="feature depth (backbones with a fixed depth ignore it)")
    features.add_argument("--seed", type=int, default=0,
                          help="projection seed for seeded backbones")

    tp = sub.add_parser("tp", help="export text-prompted masks and logits")
    tp.add_argument("--model", default="threshold-seg",
                    help="text segmenter identifier")
    tp.add_argument("--image", nargs="+", required=True,
                    help="input images (binary PGM); id = file stem")
    tp.add_argument("--class", dest="classes", action="append", required=True,
                    metavar="ID=NAME", help="class id and prompt name; repeatable")
    tp.add_argument("--out", required=True, help="output directory")
    tp.add_argument("--prompt-template", default=PROMPT_TEMPLATE,
                    help="prompt text with a {name} placeholder")
    tp.add_argument("--no-logits", action="store_true",
                    help="write masks only, skip the logits tensors")

    bank = sub.add_parser("bank", help="export candidate-mask banks with score sidecars")
    bank.add_argument("--generator", default="everything-thresh",
                      help="promptless candidate generator identifier")
    bank.add_argument("--image", nargs="+", required=True,
                      help="input images (binary PGM); id = file stem")
    bank.add_argument("--out", required=True, help="output directory")
    bank.add_argument("--cap", type=int, default=64,
                      help="maximum candidates per image, best scores kept")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "features":
            job = ExportJob(
                images=_image_pairs(args.image),
                backbone=args.backbone,
                out_dir=Path(args.out),
                patch=args.patch,
                depth=args.depth,
                seed=args.seed,
            )
            fragment = export_features(job)
        elif args.command == "bank":
            job = ExportJob(
                images=_image_pairs(args.image),
                backbone=args.generator,
                out_dir=Path(args.out),
            )
            fragment = export_bank(job, cap=args.cap)
        else:
            job = ExportJob(
                images=_image_pairs(args.image),
                backbone=args.model,
                out_dir=Path(args.out),
                classes=_class_map(args.classes),
                prompt_template=args.prompt_template,
            )
            fragment = export_tp_outputs(job, write_logits=not args.no_logits)
    except FileNotFoundError as exc:
        logger.error("%s", exc)
        return EXIT_MISSING
    except BackboneUnavailable as exc:
        logger.error("%s", exc)
        return EXIT_BACKBONE
    except (ValueError, KeyError, IndexError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    print(fragment)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
