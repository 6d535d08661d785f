"""psc-export: dump model activations for one dataset split.

    psc-export --model resnet50 --split data/train.npz --layers all_conv \
               --out dumps/train [--pool 64]

The split is an .npz file (or a directory containing data.npz) with
arrays `x` (N, C, H, W) and `y` (N,).  Models are torchvision
architecture names (random weights unless a checkpoint is given) or a
path to a torch-saved module.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from .export import ExportSpec, export_activations


def load_model(spec: str) -> torch.nn.Module:
    path = Path(spec)
    if path.exists():
        try:
            model = torch.load(path, map_location="cpu", weights_only=False)
        except Exception:
            model = torch.jit.load(path, map_location="cpu")
        if not isinstance(model, torch.nn.Module):
            raise ValueError(f"{path} does not contain an nn.Module")
        return model
    import torchvision.models

    factory = getattr(torchvision.models, spec, None)
    if factory is None:
        raise ValueError(f"unknown model {spec!r}: not a path and not a torchvision name")
    return factory(weights=None)


def load_split(spec: str) -> tuple[np.ndarray, np.ndarray]:
    path = Path(spec)
    if path.is_dir():
        path = path / "data.npz"
    if not path.is_file():
        raise ValueError(f"split not found: {path}")
    with np.load(path) as archive:
        if "x" not in archive or "y" not in archive:
            raise ValueError(f"{path} must contain arrays 'x' and 'y'")
        return archive["x"], archive["y"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psc-export", description=__doc__)
    parser.add_argument("--model", required=True, help="torchvision name or checkpoint path")
    parser.add_argument("--split", required=True, help=".npz file (or directory) with x, y")
    parser.add_argument(
        "--layers",
        default="all_conv",
        choices=["all_conv", "all_fc", "named_list"],
        help="which layers to export",
    )
    parser.add_argument(
        "--layer-names", default="", help="comma-separated module names for named_list"
    )
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--split-name", default="train", choices=["train", "val", "test", "ood"])
    parser.add_argument("--name", default="export", help="dataset name recorded in the manifest")
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--pool", type=int, default=None, help="spatial cap h*w per channel")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        model = load_model(args.model)
        data, labels = load_split(args.split)
        spec = ExportSpec(
            model=model,
            data=data,
            labels=labels,
            out_dir=Path(args.out),
            split=args.split_name,
            name=args.name,
            layer_filter=args.layers,
            layer_names=[s for s in args.layer_names.split(",") if s],
            batch_size=args.batch_size,
            device=args.device,
            pool_cap=args.pool,
        )
        manifest = export_activations(spec)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {manifest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
