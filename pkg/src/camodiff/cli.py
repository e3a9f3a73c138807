"""camodiff command line: train, infer, eval, synth, ablate, visualize.

Exit codes: 0 success, 1 computation failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from . import ablation
from .config import ConfigError, RunConfig, SamplerConfig, load_config
from .data import (IMAGE_SUFFIXES, DatasetSpec, load_dataset, read_rgb, synthesize_dataset,
                   to_u8, write_dataset)
from .denoiser import sample_batch
from .metrics import evaluate_dataset
from .trainer import load_checkpoint, train
from .viz import panel_png

log = logging.getLogger("camodiff")

OUT_ENV = "CAMODIFF_OUT"


class UsageError(Exception):
    pass


def default_out(sub: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "runs")) / sub


def _config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return load_config(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None


def _dataset(args, cfg: RunConfig, split: str):
    d = cfg.data
    if args.data is not None:
        root = Path(args.data)
        if not root.is_dir():
            raise UsageError(f"data root not found: {root}")
        return load_dataset(DatasetSpec(root, split, d.image_size, d.noise_size, d.band_width))
    seed = args.data_seed if split == "train" else args.data_seed + 1
    return synthesize_dataset(args.synthetic, d.image_size, seed=seed)


# -- commands -------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config(args.config)
    if args.epochs is not None:
        cfg = cfg.override(trainer__epochs=args.epochs)
    data = _dataset(args, cfg, "train")
    out = Path(args.out) if args.out else default_out("train")

    def progress(epoch, row):
        log.info("epoch %d/%d total loss %.4f", epoch + 1, cfg.trainer.epochs, row["total"])

    train(data, cfg, seed=args.seed, out_dir=out, progress=progress)
    print(f"wrote {out / 'ckpt.npz'} and {out / 'loss.csv'}")
    return 0


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if path.exists():
        return [path]
    raise UsageError(f"input not found: {path}")


def _save_map(prob: torch.Tensor, size, path: Path) -> None:
    im = Image.fromarray(to_u8(prob.float().numpy()))
    if im.size != size:
        im = im.resize(size, Image.BILINEAR)
    im.save(path)


def cmd_infer(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise UsageError(f"checkpoint not found: {ckpt_path}")
    model = load_checkpoint(ckpt_path).build_model()
    sampler = SamplerConfig(steps=args.steps, eta=args.eta, seed=args.seed)
    if sampler.steps < 1 or not 0 <= sampler.eta <= 1:
        raise UsageError("--steps must be >= 1 and --eta in [0, 1]")
    out = Path(args.out) if args.out else default_out("infer")
    out.mkdir(parents=True, exist_ok=True)
    if args.save_rounds:
        (out / "rounds").mkdir(exist_ok=True)
    size = model.cfg.data.image_size
    skipped = 0
    for path in _inputs(Path(args.input)):
        try:
            with Image.open(path) as im:
                orig = im.size
            image = read_rgb(path, size)
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            skipped += 1
            continue
        # one image per call so each output is independent of its neighbours
        final, rounds = sample_batch(model, image[None], sampler)
        _save_map(final[0, 0], orig, out / f"{path.stem}.png")
        if args.save_rounds:
            for i, r in enumerate(rounds, 1):
                _save_map(r[0, 0], orig, out / "rounds" / f"{path.stem}_round{i}.png")
    print(f"wrote predictions to {out}")
    if skipped:
        log.warning("%d image(s) skipped", skipped)
        return 1
    return 0


def cmd_eval(args) -> int:
    for d in (args.pred, args.gt):
        if not Path(d).is_dir():
            raise UsageError(f"directory not found: {d}")
    report = evaluate_dataset(args.pred, args.gt, args.csv)
    for k, v in report.as_dict().items():
        print(f"{k}\t{v:.4f}")
    return 0


def cmd_synth(args) -> int:
    samples = synthesize_dataset(args.count, args.size, seed=args.seed)
    root = write_dataset(samples, Path(args.out) / args.split)
    print(f"wrote {len(samples)} samples to {root}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args.config)
    if args.epochs is not None:
        cfg = cfg.override(trainer__epochs=args.epochs)
    if args.factor:
        grid = dict(ablation.parse_factor(f) for f in args.factor)
    else:
        grid = ablation.DEFAULT_GRID
    try:
        cells = ablation.build_grid(grid)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    train_set = _dataset(args, cfg, "train")
    val_set = _dataset(args, cfg, "val")

    def progress(row):
        log.info("%s=%s %s", row["factor"], row["value"], row["status"])

    rows = ablation.run_ablation(cells, cfg, train_set, val_set, seed=args.seed, progress=progress)
    out = Path(args.out) if args.out else default_out("ablate") / "results.csv"
    ablation.write_results(rows, out)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"wrote {len(rows)} rows to {out} ({failed} failed)")
    return 1 if failed else 0


def _gray(path, size=None):
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None and im.size != size:
            raise UsageError(f"{path} is {im.size[0]}x{im.size[1]}, expected {size[0]}x{size[1]}")
        return np.asarray(im, np.float64) / 255.0


def cmd_visualize(args) -> int:
    with Image.open(args.image) as im:
        image = np.asarray(im.convert("RGB"), np.float64) / 255.0
    size = (image.shape[1], image.shape[0])
    pred = _gray(args.pred, size)
    gt = _gray(args.gt, size) if args.gt else None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(panel_png(image, pred, gt))
    print(f"wrote {out}")
    return 0


# -- parser ---------------------------------------------------------------------

def _data_args(p):
    p.add_argument("--data", help="dataset root (images/ masks/ [edges/], optionally per split)")
    p.add_argument("--synthetic", type=int, default=200,
                   help="synthesize this many images when --data is not given (default 200)")
    p.add_argument("--data-seed", type=int, default=0, help="seed for synthesized data")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="camodiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write ckpt.npz + loss.csv")
    p.add_argument("--config", help="YAML or JSON run config")
    _data_args(p)
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/train)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, help="override trainer.epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict camouflage maps for an image or a directory")
    p.add_argument("checkpoint")
    p.add_argument("input", help="image file or directory")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/infer)")
    p.add_argument("--steps", type=int, default=4, help="denoising rounds N (default 4)")
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save-rounds", action="store_true", help="also write each round's prediction")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score prediction rasters against masks")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--csv", help="write a per-image report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic camouflage dataset")
    p.add_argument("out")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=("train", "val"), default="train")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablate", help="train and score a one-factor-at-a-time grid")
    p.add_argument("--config", help="base YAML or JSON run config")
    _data_args(p)
    p.add_argument("--factor", action="append",
                   help="name=v1,v2 (repeatable); factors: " + ", ".join(sorted(ablation.FACTORS)))
    p.add_argument("--out", help=f"results CSV (default ${OUT_ENV}/ablate/results.csv)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, help="override trainer.epochs")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("visualize", help="image | GT | heatmap | boundary panel as PNG")
    p.add_argument("--image", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
