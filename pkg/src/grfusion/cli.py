"""Command-line front end: ``fuse``, ``train``, ``synth`` and ``eval``.

Exit codes: 0 success, 2 shape/arity or usage errors, 3 missing or untrained
checkpoint, 4 inconsistent decision maps. Failures print one
``error: <Kind>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import errors
from .core import load_image, load_stack, save_image
from .ffig import FfigConfig
from .metrics import METRIC_NAMES, evaluate
from .pipeline import fuse, load_models
from .recombine import MODES
from .train import TrainConfig, make_dataset, read_synth_cache, train_stage, write_synth_cache

log = logging.getLogger("grfusion")

EXIT_CODES = [
    (errors.ArityError, 2),
    (errors.StackShapeError, 2),
    (errors.DomainError, 2),
    (errors.ParamError, 2),
    (errors.ConfigError, 2),
    (errors.MetricError, 2),
    (errors.ImageReadError, 2),
    (errors.UntrainedModelError, 3),
    (errors.DependencyError, 3),
    (errors.ConsistencyError, 4),
]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grfusion", description="Multifocus image fusion for any number of sources.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse", help="fuse N co-registered sources into one image")
    p.add_argument("inputs", nargs="+")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--checkpoint", default="checkpoints")
    p.add_argument("--mode", choices=MODES, default="full")
    p.add_argument("--save-masks", action="store_true")
    p.add_argument("--allow-untrained", action="store_true")
    p.add_argument("--repair", action="store_true")
    p.add_argument("--tile-size", type=int, default=128)
    p.add_argument("--overlap", type=int, default=16)
    p.add_argument("--delta", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--stage", choices=("hpd", "ffig"), required=True)
    p.add_argument("--checkpoint", default="checkpoints")
    p.add_argument("--data", help="synthesized cache directory (data/synth/<seed>)")
    p.add_argument("--raw", help="directory of all-in-focus images to synthesize from")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lambda", dest="lam", type=float, default=0.05)
    p.add_argument("--delta", type=int, default=None)
    p.add_argument("--sum-loss", action="store_true")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="materialize a synthetic training cache")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--raw", help="directory of all-in-focus images; synthetic textures when omitted")
    p.add_argument("--out", default="data/synth")

    p = sub.add_parser("eval", help="score fused images with the five metrics")
    p.add_argument("--fused")
    p.add_argument("--sources", nargs="+")
    p.add_argument("--manifest", help="text file of lines 'fused_path;src1,src2,...'")
    p.add_argument("--csv", help="write CSV here and print a table on stdout")
    return parser


def _raw_images(raw: str | None) -> list[Path] | None:
    if not raw:
        return None
    paths = sorted(p for p in Path(raw).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"))
    if not paths:
        raise errors.DomainError(f"no images in {raw}")
    return paths


def cmd_fuse(args) -> int:
    stack = load_stack(args.inputs)
    hpd, ffig = load_models(args.checkpoint, args.allow_untrained, args.seed, args.delta)
    result = fuse(stack, hpd, ffig, mode=args.mode, tile_size=args.tile_size, overlap=args.overlap, repair=args.repair)
    save_image(args.output, result.fused)
    if args.save_masks:
        out = Path(args.output)
        result.save_side_outputs(out.parent, out.stem)
    log.info("fused %d sources into %s", stack.n, args.output)
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig(lr=args.lr, lam=args.lam, sum_loss=args.sum_loss, seed=args.seed)
    if args.batch_size is not None:
        cfg.batch_hpd = cfg.batch_ffig = args.batch_size
    if args.data:
        samples = read_synth_cache(args.data)
    else:
        samples = make_dataset(args.count, args.seed, args.size, corpus=_raw_images(args.raw))
    net_cfg = FfigConfig(delta=args.delta) if args.stage == "ffig" and args.delta is not None else None
    bundle = train_stage(args.stage, samples, cfg, args.checkpoint, epochs=args.epochs, resume=args.resume, net_cfg=net_cfg)
    log.info("%s checkpoint at %s after %d epochs", args.stage, bundle.path, bundle.epochs_completed)
    return 0


def cmd_synth(args) -> int:
    samples = make_dataset(args.count, args.seed, args.size, corpus=_raw_images(args.raw))
    root = write_synth_cache(samples, Path(args.out) / str(args.seed))
    log.info("wrote %d samples to %s", len(samples), root)
    return 0


def _eval_jobs(args) -> list[tuple[str, list[str]]]:
    jobs = []
    if args.manifest:
        for line in Path(args.manifest).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fused, _, srcs = line.partition(";")
            jobs.append((fused.strip(), [s.strip() for s in srcs.split(",") if s.strip()]))
    if args.fused:
        if not args.sources:
            raise errors.ArityError("--fused needs --sources")
        jobs.append((args.fused, list(args.sources)))
    if not jobs:
        raise errors.ArityError("nothing to evaluate; pass --fused/--sources or --manifest")
    return jobs


def cmd_eval(args) -> int:
    rows = []
    for fused_path, src_paths in _eval_jobs(args):
        stack = load_stack(src_paths)
        report = evaluate(load_image(fused_path), stack)
        rows.append({"image": fused_path, **report.row()})
    mean = {"image": "mean", **{m: float(np.mean([r[m] for r in rows])) for m in METRIC_NAMES}}
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["image", *METRIC_NAMES], lineterminator="\n")
    writer.writeheader()
    for row in [*rows, mean]:
        writer.writerow({k: (f"{v:.5f}" if isinstance(v, float) else v) for k, v in row.items()})
    if args.csv:
        Path(args.csv).write_text(buf.getvalue())
        width = max(len(r["image"]) for r in [*rows, mean])
        print(f"{'image':<{width}}  " + "  ".join(f"{m:>8}" for m in METRIC_NAMES))
        for row in [*rows, mean]:
            print(f"{row['image']:<{width}}  " + "  ".join(f"{row[m]:8.5f}" for m in METRIC_NAMES))
    else:
        sys.stdout.write(buf.getvalue())
    return 0


COMMANDS = {"fuse": cmd_fuse, "train": cmd_train, "synth": cmd_synth, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.manual_seed(getattr(args, "seed", 0))
    try:
        return COMMANDS[args.command](args)
    except errors.GRFusionError as exc:
        for kind, code in EXIT_CODES:
            if isinstance(exc, kind):
                print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
                return code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
