"""``xfuse`` command-line tool.

Subcommands: train-auto, train-fuse, fuse, eval, grad-check, ablate.
Training options may also come from a ``key = value`` file passed with
``--config``; explicit flags win over the file, which wins over defaults.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import metrics
from .checkpoint import ArchitectureMismatchError, CheckpointError, load_checkpoint, save_checkpoint
from .config import VARIANTS, ConfigError, FuseConfig, parse_text, read_config_file, variant_config
from .core import ShapeError
from .imageio import ImageReadError, as_gray, read_image, rgb_to_ycrcb, write_image, ycrcb_to_rgb
from .model import FusionNet
from .trainer import (IMAGE_SUFFIXES, TrainConfig, build_fusion_model, fuse_arrays, load_corpus,
                      train_one_stage, train_stage1, train_stage2)
from .verify import attention_block_counts, complementarity_probe, full_model_grad_check

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_DIMENSION = 3
EXIT_UNREADABLE = 4
EXIT_CHECKPOINT = 5
EXIT_NO_STEMS = 6
EXIT_CHECK_FAILED = 7

log = logging.getLogger("xfuse")

# flag dest -> TrainConfig field
TRAIN_FLAGS = {"epochs": "epochs", "batch": "batch_size", "size": "image_size", "seed": "seed",
               "lr": "lr0", "steps_per_epoch": "steps_per_epoch", "clip": "clip_norm"}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def threads() -> int:
    try:
        return max(1, int(os.environ.get("XFUSE_THREADS", "1")))
    except ValueError:
        raise CliError("XFUSE_THREADS must be an integer", EXIT_USAGE) from None


# ----------------------------------------------------------------------------
# settings


def split_config_file(path) -> tuple[dict, dict]:
    """Config file -> (model overrides, training overrides).  Unknown keys are errors."""
    raw = read_config_file(path)
    model_keys = {f.name for f in dataclasses.fields(FuseConfig)}
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)} - {"stage"}
    unknown = sorted(set(raw) - model_keys - train_keys)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s): {', '.join(unknown)}")
    as_text = lambda keys: "".join(f"{k} = {v}\n" for k, v in raw.items() if k in keys)  # noqa: E731
    return parse_text(as_text(model_keys), FuseConfig), parse_text(as_text(train_keys), TrainConfig)


def resolve_settings(args, stage: int, base_model: FuseConfig | None = None) -> tuple[FuseConfig, TrainConfig]:
    """Merge defaults, the config file and explicit flags, in rising priority."""
    model_over, train_over = ({}, {})
    if getattr(args, "config", None):
        model_over, train_over = split_config_file(args.config)
    for flag, name in TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            train_over[name] = value
    model_cfg = dataclasses.replace(base_model or FuseConfig(), **model_over)
    try:
        return model_cfg, TrainConfig.for_stage(stage, **train_over)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _corpus(args, size: int):
    try:
        pairs = load_corpus(args.data, size)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_UNREADABLE) from exc
    if not pairs:
        raise CliError(f"no usable <stem>_ir / <stem>_vi pairs of size {size} in {args.data}", EXIT_NO_STEMS)
    return pairs


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise CliError(f"{path}: {exc}", EXIT_CHECKPOINT) from exc


def _read(path) -> np.ndarray:
    try:
        return read_image(path)
    except ImageReadError as exc:
        raise CliError(str(exc), EXIT_UNREADABLE) from exc


def modality_paths(out) -> tuple[Path, Path]:
    out = Path(out)
    return (out.with_name(f"{out.stem}_ir{out.suffix}"), out.with_name(f"{out.stem}_vi{out.suffix}"))


# ----------------------------------------------------------------------------
# fusion


def fuse_planes(model: FusionNet, ir, vi) -> dict[str, np.ndarray]:
    """Fuse one pair.  A colour visible image contributes its luma; its Cr and
    Cb planes pass through untouched and the result is recomposed to RGB."""
    ir = as_gray(ir)
    vi = np.asarray(vi, dtype=np.float64)
    if ir.shape != vi.shape[:2]:
        raise ShapeError(f"infrared {ir.shape} and visible {vi.shape[:2]} sizes differ")
    if ir.shape[0] % 8 or ir.shape[1] % 8:
        raise ShapeError(f"image sides must be multiples of 8, got {ir.shape}")
    if vi.ndim == 2:
        fused = fuse_arrays(model, ir, vi)
        return {"y": fused, "image": fused}
    y, cr, cb = rgb_to_ycrcb(vi)
    fused = fuse_arrays(model, ir, y)
    return {"y": fused, "cr": cr, "cb": cb, "image": ycrcb_to_rgb(fused, cr, cb)}


def _model_from(path) -> FusionNet:
    ckpt = _load_ckpt(path)
    try:
        return build_fusion_model(ckpt)
    except ArchitectureMismatchError as exc:
        raise CliError(f"{path}: {exc}", EXIT_CHECKPOINT) from exc


# ----------------------------------------------------------------------------
# evaluation


def _stem(path: Path) -> str:
    stem = path.stem
    for tag in ("_ir", "_vi", "_fused"):
        if stem.endswith(tag):
            return stem[: -len(tag)]
    return stem


def _index(directory, tag: str | None = None) -> dict[str, Path]:
    d = Path(directory)
    if not d.is_dir():
        raise CliError(f"{d} is not a directory", EXIT_UNREADABLE)
    out = {}
    for p in sorted(d.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        if tag and p.stem.endswith(("_ir", "_vi")) and not p.stem.endswith(tag):
            continue  # ir and vi may share one directory
        out.setdefault(_stem(p), p)
    return out


def evaluate_dirs(fused_dir, ir_dir, vi_dir) -> tuple[metrics.MetricReport, list[str]]:
    fused, ir, vi = _index(fused_dir), _index(ir_dir, "_ir"), _index(vi_dir, "_vi")
    stems = sorted(set(fused) & set(ir) & set(vi))
    unmatched = sorted((set(fused) | set(ir) | set(vi)) - set(stems))
    if not stems:
        raise CliError("no filename stems common to all three directories", EXIT_NO_STEMS)

    def one(stem):
        return metrics.evaluate_pair(stem, as_gray(_read(fused[stem])), as_gray(_read(ir[stem])),
                                     as_gray(_read(vi[stem])))

    with ThreadPoolExecutor(max_workers=threads()) as pool:
        rows = list(pool.map(one, stems))
    return metrics.MetricReport(rows), unmatched


# ----------------------------------------------------------------------------
# subcommands


def cmd_train_auto(args) -> int:
    model_cfg, cfg = resolve_settings(args, 1, _variant(args))
    pairs = _corpus(args, cfg.image_size)
    result = train_stage1(pairs, cfg, model_cfg, args.log or sys.stdout)
    for path, ckpt in zip(modality_paths(args.out), (result.ir, result.vi)):
        save_checkpoint(path, ckpt)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_train_fuse(args) -> int:
    enc_ir, enc_vi = _load_ckpt(args.enc_ir), _load_ckpt(args.enc_vi)
    base = enc_ir.config if args.variant is None else variant_config(args.variant, enc_ir.config)
    model_cfg, cfg = resolve_settings(args, 2, base)
    pairs = _corpus(args, cfg.image_size)
    try:
        result = train_stage2(pairs, enc_ir, enc_vi, cfg, model_cfg, args.log or sys.stdout)
    except ArchitectureMismatchError as exc:
        raise CliError(str(exc), EXIT_CHECKPOINT) from exc
    save_checkpoint(args.out, result.checkpoint)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    model = _model_from(args.model)
    ir, vi = _read(args.ir), _read(args.vi)
    planes = fuse_planes(model, ir, vi)
    write_image(args.out, planes["image"])
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    report, unmatched = evaluate_dirs(args.fused, args.ir, args.vi)
    for stem in unmatched:
        log.warning("stem %s not present in all directories; skipped", stem)
    report.write_csv(args.out, args.method)
    mean = report.mean(args.method)
    print(", ".join(f"{m}={getattr(mean, m):.4f}" for m in metrics.METRIC_NAMES))
    print(f"wrote {args.out} ({len(report.rows)} pairs, {len(unmatched)} warnings)")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = variant_config(args.variant)
    report = full_model_grad_check(cfg, args.size, args.seed, args.tol, args.samples)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def _variant(args) -> FuseConfig | None:
    name = getattr(args, "variant", None)
    return None if name is None else variant_config(name)


def cmd_ablate(args) -> int:
    base_cfg = variant_config(args.variant)
    if args.dry_run:
        model_cfg, _ = resolve_settings(args, 2, base_cfg)
        manifest = FusionNet(model_cfg, np.random.default_rng(0)).param_store().manifest()
        print(f"variant {args.variant}")
        print(model_cfg.to_text(), end="")
        for name, shape in manifest:
            print(f"  {name} {'x'.join(map(str, shape))}")
        print(f"parameters: {len(manifest)} tensors, {sum(int(np.prod(s)) for _, s in manifest)} values")
        for branch, counts in attention_block_counts(manifest).items():
            print(f"branch {branch}: {counts['sa']} SA blocks, {counts['ca']} CA blocks")
        if model_cfg.fusion == "cam":
            print("probe " + complementarity_probe(model_cfg).summary())
        return EXIT_OK
    if args.data is None or args.out is None:
        raise CliError("ablate needs --data and --out unless --dry-run is given", EXIT_USAGE)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sink = args.log or sys.stdout
    if base_cfg.two_stage:
        model_cfg, cfg1 = resolve_settings(args, 1, base_cfg)
        pairs = _corpus(args, cfg1.image_size)
        s1 = train_stage1(pairs, cfg1, model_cfg, sink)
        for path, ckpt in zip(modality_paths(out / "auto.ckpt"), (s1.ir, s1.vi)):
            save_checkpoint(path, ckpt)
        _, cfg2 = resolve_settings(args, 2, base_cfg)
        result = train_stage2(pairs, s1.ir, s1.vi, cfg2, model_cfg, sink)
    else:
        model_cfg, cfg2 = resolve_settings(args, 2, base_cfg)
        pairs = _corpus(args, cfg2.image_size)
        result = train_one_stage(pairs, cfg2, model_cfg, sink)
    save_checkpoint(out / "fuse.ckpt", result.checkpoint)
    model = build_fusion_model(result.checkpoint)
    fused_dir = out / "fused"
    fused_dir.mkdir(exist_ok=True)
    with ThreadPoolExecutor(max_workers=threads()) as pool:
        images = list(pool.map(lambda p: fuse_arrays(model, p.ir, p.vi), pairs))
    rows = []
    for pair, img in zip(pairs, images):
        write_image(fused_dir / f"{pair.stem}.pgm", img)
        rows.append(metrics.evaluate_pair(pair.stem, img, pair.ir, pair.vi))
    report = metrics.MetricReport(rows)
    report.write_csv(out / "report.csv", args.variant)
    mean = report.mean(args.variant)
    print(", ".join(f"{m}={getattr(mean, m):.4f}" for m in metrics.METRIC_NAMES))
    print(f"wrote {out / 'report.csv'}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def _train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="directory of <stem>_ir / <stem>_vi images")
    _schedule_options(p)


def _schedule_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--size", type=int, help="image side length (pairs of other sizes are skipped)")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--steps-per-epoch", type=int, help="0 means one pass over the corpus")
    p.add_argument("--clip", type=float, help="gradient-norm cap, 0 disables")
    p.add_argument("--log", help="append training log lines here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xfuse", description="Infrared/visible image fusion.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-auto", help="stage 1: train one autoencoder per modality")
    _train_options(p)
    p.add_argument("--out", required=True, help="checkpoint path; _ir and _vi are appended to the stem")
    p.add_argument("--variant", choices=VARIANTS)
    p.set_defaults(func=cmd_train_auto)

    p = sub.add_parser("train-fuse", help="stage 2: train the fusion module and decoder")
    _train_options(p)
    p.add_argument("--enc-ir", required=True)
    p.add_argument("--enc-vi", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=VARIANTS)
    p.set_defaults(func=cmd_train_fuse)

    p = sub.add_parser("fuse", help="fuse one infrared/visible pair")
    p.add_argument("--ir", required=True)
    p.add_argument("--vi", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="objective metrics over a fused corpus")
    p.add_argument("--fused", required=True)
    p.add_argument("--ir", required=True)
    p.add_argument("--vi", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", default="mean", help="label of the mean row")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference check of the whole network")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--variant", choices=VARIANTS, default="s1-c1")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ablate", help="train and evaluate one ablation variant")
    p.add_argument("--variant", required=True, choices=VARIANTS)
    p.add_argument("--data")
    p.add_argument("--out", help="output directory")
    p.add_argument("--dry-run", action="store_true", help="print the manifest and attention probe only")
    _schedule_options(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        threads()
        return args.func(args)
    except CliError as exc:
        print(f"xfuse: error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"xfuse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ShapeError as exc:
        print(f"xfuse: error: {exc}", file=sys.stderr)
        return EXIT_DIMENSION
    except (ImageReadError, FileNotFoundError) as exc:
        print(f"xfuse: error: {exc}", file=sys.stderr)
        return EXIT_UNREADABLE


if __name__ == "__main__":
    sys.exit(main())
