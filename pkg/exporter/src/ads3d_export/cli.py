"""Command line entry points: feature export and TIFF conversion."""

from __future__ import annotations

import argparse
import sys

from .backbone import BackboneConfig, ExportError
from .export import MODALITIES, ExportJob, export_features
from .tiff import convert_tiff

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ads3d-export",
        description="Export deep patch-feature tensors for organized 3D scan "
                    "datasets and convert float TIFF clouds to ADTN.")
    sub = parser.add_subparsers(dest="command", required=True)

    exp = sub.add_parser("export", help="write one feature tensor per dataset sample")
    exp.add_argument("--root", required=True, help="dataset root directory")
    exp.add_argument("--out", required=True,
                     help="output root; mirrors the dataset layout with feat/ dirs")
    exp.add_argument("--modality", choices=MODALITIES, default="rgb",
                     help="rgb images or depth rendered from the point clouds")
    exp.add_argument("--classes", nargs="*", default=None,
                     help="subset of class names (default: all found)")
    exp.add_argument("--weights", default="pretrained",
                     help='state-dict path, "pretrained", or "random" (plumbing tests)')
    exp.add_argument("--seed", type=int, default=0, help="init seed for random weights")
    exp.add_argument("--batch_size", type=int, default=8)

    conv = sub.add_parser("convert", help="3-channel float TIFF to ADTN tensor")
    conv.add_argument("src")
    conv.add_argument("dst")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export":
            if args.batch_size < 1:
                raise ValueError(f"batch_size must be >= 1, got {args.batch_size}")
            job = ExportJob(
                root=args.root, out=args.out, modality=args.modality,
                classes=args.classes or [],
                backbone=BackboneConfig(weights=args.weights, seed=args.seed,
                                        batch_size=args.batch_size))
            written = export_features(job)
            print(f"wrote {len(written)} feature tensors under {job.out}")
        else:
            convert_tiff(args.src, args.dst)
            print(f"wrote {args.dst}")
    except (ExportError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
