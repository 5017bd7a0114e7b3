"""Command-line surface: train, infer, eval, bench, render, modality, slic, synth.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
files), 3 numeric failure during training/inference.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import metrics as mx
from . import modality as mod
from . import slic as sl
from . import training as tr
from .imageio import ImageFormatError, load_image, load_labels, read_manifest, save_image, save_labels
from .model import infer_labels
from .superpixels import boundary_overlay, render_mean_fill

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(ValueError):
    pass


class DataError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _require_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise DataError(f"{what} not found: {path}")
    return path


def _parse_sp(text: str) -> tuple[int, int]:
    try:
        h, w = (int(p) for p in text.split(","))
    except ValueError:
        raise UsageError(f"--sp expects H,W integers, got {text!r}") from None
    if h < 2 or w < 2:
        raise UsageError("--sp entries must be >= 2")
    return h, w


def _sp_from_count(k: int, h: int, w: int) -> tuple[int, int]:
    """Nearest aspect-preserving (rows, cols) cell grid for ~k superpixels."""
    sp_h = max(2, round(math.sqrt(k * h / w)))
    sp_w = max(2, round(k / sp_h))
    return sp_h, sp_w


def _jobs_cap(jobs: int) -> int:
    cap = os.environ.get("CDS_THREADS")
    if cap is not None:
        try:
            jobs = min(jobs, max(1, int(cap)))
        except ValueError:
            raise UsageError(f"CDS_THREADS must be an integer, got {cap!r}") from None
    return max(1, jobs)


# -- subcommand implementations ------------------------------------------------------


def _cmd_train(args) -> int:
    _require_file(args.config, "config file")
    cfg = tr.TrainConfig()
    if args.preset:
        cfg = tr.apply_preset(cfg, args.preset)
    try:
        cfg = tr.parse_config_file(args.config, cfg)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if args.seed is not None:
        cfg = tr.TrainConfig(**{**cfg.__dict__, "seed": args.seed})
    try:
        cfg.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    if not cfg.manifest:
        raise UsageError("config must set 'manifest'")
    manifest = cfg.manifest
    if not os.path.isabs(manifest):
        manifest = os.path.join(os.path.dirname(os.path.abspath(args.config)), manifest)
    _require_file(manifest, "manifest")
    ckpt, csv = tr.train_loop(manifest, cfg)
    print(f"checkpoint: {ckpt}")
    print(f"losses: {csv}")
    return EXIT_OK


def _load_model(path: str, expect_d: int | None):
    _require_file(path, "model checkpoint")
    try:
        params = tr.load_checkpoint(path)
    except ValueError as e:
        raise DataError(str(e)) from None
    if expect_d is not None and expect_d != params.cfg.d:
        raise DataError(f"checkpoint was trained with d={params.cfg.d}, conflicting --d {expect_d}")
    return params


def _cmd_infer(args) -> int:
    params = _load_model(args.model, args.d)
    image = load_image(_require_file(args.image, "image"))
    if args.sp:
        sp = _parse_sp(args.sp)
    elif args.k:
        sp = _sp_from_count(args.k, *image.shape[:2])
    else:
        raise UsageError("one of --sp or --k is required")
    labels = infer_labels(params, image, sp, connectivity=not args.no_connectivity)
    save_labels(args.out, labels)
    print(f"labels: {args.out} ({np.unique(labels).size} superpixels)")
    return EXIT_OK


def _cmd_eval(args) -> int:
    pred = load_labels(_require_file(args.pred, "prediction"))
    gt = load_labels(_require_file(args.gt, "ground truth"))
    if pred.shape != gt.shape:
        raise DataError(f"size mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    report = mx.evaluate_pair(pred, gt, args.tol)
    print(report.csv_row())
    return EXIT_OK


def _cmd_bench(args) -> int:
    _require_file(args.manifest, "manifest")
    try:
        counts = sorted(int(c) for c in args.counts.split(","))
    except ValueError:
        raise UsageError(f"--counts expects comma-separated integers, got {args.counts!r}") from None
    method = args.method
    if method == "cds":
        if not args.model:
            raise UsageError("--method cds requires --model")
        params = _load_model(args.model, None)

        def segment(image, count):
            sp = _sp_from_count(count, *image.shape[:2])
            return infer_labels(params, image, sp, connectivity=not args.no_connectivity)

    elif method == "slic":

        def segment(image, count):
            return sl.slic(image, sl.SlicConfig(k=count, connectivity=not args.no_connectivity))

    else:  # grid

        def segment(image, count):
            h, w = image.shape[:2]
            d = max(1, round(math.sqrt(h * w / count)))
            return sl.grid_baseline(h, w, d)

    pairs = read_manifest(args.manifest)
    if not pairs:
        raise DataError(f"manifest {args.manifest} lists no samples")
    rows, errors = mx.sweep(segment, pairs, counts, tol=args.tol, jobs=_jobs_cap(args.jobs))
    for err in errors:
        print(f"skipped: {err}", file=sys.stderr)
    if not rows:
        raise DataError("no readable image/label pairs")
    lines = [mx.CSV_HEADER] + [r.csv_row() for r in rows]
    if args.out:
        with open(args.out, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
        print(f"curves: {args.out}")
    else:
        print("\n".join(lines))
    return EXIT_OK


def _cmd_render(args) -> int:
    image = load_image(_require_file(args.image, "image"))
    labels = load_labels(_require_file(args.labels, "labels"))
    if image.shape[:2] != labels.shape:
        raise DataError(f"size mismatch: image {image.shape[:2]} vs labels {labels.shape}")
    if args.mode == "mean":
        out = render_mean_fill(image, labels)
    else:
        try:
            color = tuple(float(c) for c in args.color.split(","))
        except ValueError:
            raise UsageError(f"--color expects r,g,b floats, got {args.color!r}") from None
        if len(color) != 3:
            raise UsageError("--color expects exactly three components")
        out = boundary_overlay(image, labels, color)
    save_image(args.out, out)
    print(f"rendered: {args.out}")
    return EXIT_OK


_KIND_ALIASES = {"grad": "gradient", "gradient": "gradient", "hsv": "hsv", "lab": "lab"}


def _cmd_modality(args) -> int:
    image = load_image(_require_file(args.image, "image"))
    out = mod.make_aux(image, _KIND_ALIASES[args.kind])
    save_image(args.out, out)
    print(f"modality: {args.out}")
    return EXIT_OK


def _cmd_slic(args) -> int:
    image = load_image(_require_file(args.image, "image"))
    try:
        cfg = sl.SlicConfig(k=args.k, m=args.m, iters=args.iters, connectivity=not args.no_connectivity)
        labels = sl.slic(image, cfg)
    except ValueError as e:
        raise UsageError(str(e)) from None
    save_labels(args.out, labels)
    print(f"labels: {args.out} ({np.unique(labels).size} superpixels)")
    return EXIT_OK


def _cmd_synth(args) -> int:
    manifest = tr.make_synthetic_dataset(args.n, args.size, args.seed, args.out)
    print(f"manifest: {manifest}")
    return EXIT_OK


# -- parser wiring ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cdspix", description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("train", help="train a model from a config file", formatter_class=fmt)
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--preset", choices=sorted(tr.PRESETS), default=None, help="apply a scale preset before the config")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="predict superpixels for one image", formatter_class=fmt)
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--image", required=True, help="input image (PPM/PNG)")
    p.add_argument("--sp", default=None, help="superpixel grid as H,W (cells)")
    p.add_argument("--k", type=int, default=None, help="approximate superpixel count (aspect-preserving grid)")
    p.add_argument("--d", type=int, default=None, help="expected cell side; must match the checkpoint")
    p.add_argument("--no-connectivity", action="store_true", help="skip connectivity enforcement")
    p.add_argument("--out", required=True, help="output label map (16-bit PGM)")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="compare a predicted label map against ground truth", formatter_class=fmt)
    p.add_argument("--pred", required=True, help="predicted label map (PGM)")
    p.add_argument("--gt", required=True, help="ground-truth label map (PGM)")
    p.add_argument("--tol", type=int, default=None, help="boundary tolerance in pixels (default: diagonal-scaled)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench", help="metric curves over superpixel counts", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="dataset manifest CSV")
    p.add_argument("--method", choices=("cds", "slic", "grid"), required=True)
    p.add_argument("--counts", required=True, help="comma-separated superpixel counts")
    p.add_argument("--model", default=None, help="checkpoint (required for --method cds)")
    p.add_argument("--tol", type=int, default=None, help="boundary tolerance in pixels")
    p.add_argument("--jobs", type=int, default=1, help="parallel images (capped by CDS_THREADS)")
    p.add_argument("--no-connectivity", action="store_true", help="skip connectivity enforcement")
    p.add_argument("--out", default=None, help="output CSV (default: stdout)")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("render", help="visualize a labeling on an image", formatter_class=fmt)
    p.add_argument("--image", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--mode", choices=("mean", "boundary"), required=True)
    p.add_argument("--color", default="1,0,0", help="boundary color as r,g,b in [0,1]")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("modality", help="write an auxiliary modality image", formatter_class=fmt)
    p.add_argument("--image", required=True)
    p.add_argument("--kind", choices=("grad", "hsv", "lab"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_modality)

    p = sub.add_parser("slic", help="run the SLIC baseline on one image", formatter_class=fmt)
    p.add_argument("--image", required=True)
    p.add_argument("--k", type=int, default=100, help="target superpixel count")
    p.add_argument("--m", type=float, default=10.0, help="compactness weight")
    p.add_argument("--iters", type=int, default=10, help="clustering iterations")
    p.add_argument("--no-connectivity", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_slic)

    p = sub.add_parser("synth", help="generate a synthetic dataset", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=64, help="number of images")
    p.add_argument("--size", type=int, default=64, help="square image side")
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=_cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ImageFormatError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except tr.NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
