"""Command-line entry point: ``deshadow <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from deshadow.checkpoint import CheckpointError, load_checkpoint
from deshadow.data import AugmentConfig, DatasetError, load_dataset, load_split
from deshadow.gradcheck import BLOCKS, gradcheck
from deshadow.image import ImageError, read_image, side_by_side, to_image, to_tensor, write_image
from deshadow.metrics import LossConfig, MetricsReport, table2
from deshadow.model import ABLATIONS, ConfigError, ModelConfig, build_model
from deshadow.pyramid import Pyramid, PyramidError, decompose, max_levels, reconstruct
from deshadow.train import NonFiniteLossError, TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("deshadow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _dataset_root(args) -> Path:
    root = args.dataset_root or os.environ.get("DESHADOW_DATA_DIR")
    if not root:
        raise UsageError("no dataset root: pass --dataset-root or set DESHADOW_DATA_DIR")
    return Path(root)


def _load_model(args):
    params, cfg, meta = load_checkpoint(args.checkpoint)
    if args.levels is not None and args.levels != cfg.levels:
        raise UsageError(f"--levels {args.levels} conflicts with the checkpoint's {cfg.levels} levels")
    return build_model(cfg, params), cfg, meta


def _predict(model, cfg: ModelConfig, img: np.ndarray, policy: str = "fail") -> np.ndarray:
    h, w = img.shape[:2]
    x = to_tensor(img, torch.float32)
    if max_levels(h, w) < cfg.levels:
        if policy != "resize":
            raise PyramidError(
                f"{h}x{w} input is too small for {cfg.levels} levels; use --on-size-violation resize"
            )
        scale = 4 * 2**cfg.levels / min(h, w)
        size = (max(round(h * scale), 4 * 2**cfg.levels), max(round(w * scale), 4 * 2**cfg.levels))
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    with torch.no_grad():
        y = model(x)
    if y.shape[-2:] != (h, w):
        y = F.interpolate(y, size=(h, w), mode="bilinear", align_corners=False).clamp(0, 1)
    return to_image(y)


def cmd_decompose(args) -> int:
    img = read_image(args.input).astype(np.float32)
    pyr = decompose(img, args.levels)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bands = []
    for k, band in enumerate(pyr.highs):
        name = f"high_{k:02d}.npy"
        np.save(out / name, band.astype(np.float32))
        bands.append({"file": name, "kind": "high", "level": k, "shape": list(band.shape)})
    np.save(out / "low.npy", pyr.low.astype(np.float32))
    bands.append({"file": "low.npy", "kind": "low", "level": args.levels, "shape": list(pyr.low.shape)})
    index = {"levels": args.levels, "dtype": "float32", "source": str(args.input), "shape": list(img.shape), "bands": bands}
    (out / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    print(f"wrote {len(bands)} bands to {out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    d = Path(args.in_dir)
    try:
        index = json.loads((d / "index.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"no index.json in {d}") from exc
    highs = [np.load(d / b["file"]) for b in sorted(
        (b for b in index["bands"] if b["kind"] == "high"), key=lambda b: b["level"])]
    low = np.load(d / next(b["file"] for b in index["bands"] if b["kind"] == "low"))
    img = reconstruct(Pyramid(highs, low))
    write_image(args.out, img)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    root = _dataset_root(args)
    train_set, test_set = load_dataset(root, args.dataset, size=args.size)
    model_cfg = ModelConfig.for_ablation(args.ablation, levels=args.levels if args.levels is not None else 3, seed=args.seed)
    aug = None if args.no_augment else AugmentConfig(crop_size=args.crop_size, rng_seed=args.seed)
    cfg = TrainConfig(
        lr=args.lr,
        batch_size=args.batch_size,
        max_steps=args.max_steps,
        eval_every=args.eval_every,
        seed=args.seed,
        loss=LossConfig(ssim_mode=args.ssim_mode),
        ablation=args.ablation,
        augment=aug,
        grad_clip=args.grad_clip,
    )
    result = train(cfg, (train_set, test_set), model_cfg, args.out)
    print(f"trained {cfg.max_steps} steps; last checkpoint {result.last_checkpoint}")
    if result.best_checkpoint:
        print(f"best test PSNR {result.best_psnr:.2f} dB at {result.best_checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    samples = load_split(_dataset_root(args), args.dataset, args.split, size=args.size)
    if not samples:
        raise DatasetError(f"{args.dataset}/{args.split} has no image pairs")
    model = cfg = None
    method = args.method or ("Input" if args.checkpoint is None else "Ours")
    if args.checkpoint is not None:
        model, cfg, _ = _load_model(args)
    report = MetricsReport(args.dataset, args.split, method, ssim_mode=args.ssim_mode)
    img_dir = Path(args.save_images) if args.save_images else None
    for s in samples:
        pred = s.shadow if model is None else _predict(model, cfg, s.shadow, args.on_size_violation)
        # --self-target scores the predictions against themselves as a sanity route
        report.add(s.id, pred, pred if args.self_target else s.target)
        if img_dir is not None:
            write_image(img_dir / f"{s.id}.png", side_by_side([s.shadow, pred, s.target]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.tsv").write_text(report.to_tsv())
    (out / "metrics.json").write_text(report.to_json() + "\n")
    agg = report.aggregates
    print(f"{method} on {args.dataset}/{args.split}: PSNR {agg['psnr']:.2f}  SSIM {agg['ssim']:.2f}  RMSE {agg['rmse']:.2f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model, cfg, _ = _load_model(args)
    img = read_image(args.input)
    if img.shape[2] != cfg.image_channels:
        img = np.repeat(img, cfg.image_channels, axis=2) if img.shape[2] == 1 else img[:, :, :1]
    pred = _predict(model, cfg, img, args.on_size_violation)
    write_image(args.out, pred)
    if args.triptych:
        panels = [img, pred]
        if args.target:
            panels.append(read_image(args.target))
        write_image(args.triptych, side_by_side(panels))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = ModelConfig.for_ablation("full", levels=args.levels if args.levels is not None else 3, seed=args.seed)
    report = gradcheck(cfg, seed=args.seed, corrupt=args.corrupt, size=args.size, samples=args.samples, blocks=args.blocks)
    print(report.to_text(), end="")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_report(args) -> int:
    reports = []
    for path in args.metrics:
        try:
            reports.append(MetricsReport.from_json(Path(path).read_text()))
        except FileNotFoundError as exc:
            raise DatasetError(f"missing metrics file {path}") from exc
    table = table2(reports)
    if args.out:
        Path(args.out).write_text(table)
    print(table, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deshadow", description="Laplacian-pyramid document shadow removal")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("decompose", help="split an image into pyramid bands")
    d.add_argument("--input", required=True)
    d.add_argument("--levels", type=int, default=3)
    d.add_argument("--out-dir", required=True)
    d.set_defaults(func=cmd_decompose)

    r = sub.add_parser("reconstruct", help="fold pyramid bands back into an image")
    r.add_argument("--in-dir", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reconstruct)

    def data_flags(q):
        q.add_argument("--dataset-root")
        q.add_argument("--dataset", choices=["jung", "kligler"], required=True)
        q.add_argument("--size", type=int, default=512, help="canonical square size; 0 keeps native size")

    t = sub.add_parser("train", help="train a model")
    data_flags(t)
    t.add_argument("--out", required=True)
    t.add_argument("--levels", type=int)
    t.add_argument("--max-steps", type=int, default=1000)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--batch-size", type=int, default=1)
    t.add_argument("--eval-every", type=int, default=0)
    t.add_argument("--crop-size", type=int, default=256)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--grad-clip", type=float)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--ablation", choices=ABLATIONS, default="full")
    t.add_argument("--ssim-mode", choices=["global", "windowed"], default="windowed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint (or the raw inputs) on a split")
    data_flags(e)
    e.add_argument("--split", choices=["train", "test"], default="test")
    e.add_argument("--checkpoint")
    e.add_argument("--levels", type=int)
    e.add_argument("--out", required=True)
    e.add_argument("--method")
    e.add_argument("--save-images")
    e.add_argument("--self-target", action="store_true", help="use the predictions as targets (sanity check)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--ssim-mode", choices=["global", "windowed"], default="global")
    e.add_argument("--on-size-violation", choices=["fail", "resize"], default="fail")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="remove shadows from one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--target")
    i.add_argument("--triptych")
    i.add_argument("--levels", type=int)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--on-size-violation", choices=["fail", "resize"], default="fail")
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--levels", type=int)
    g.add_argument("--size", type=int, default=16)
    g.add_argument("--samples", type=int, default=6)
    g.add_argument("--blocks", nargs="+", choices=BLOCKS, help="check only these blocks")
    g.add_argument("--corrupt", choices=BLOCKS, help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    rp = sub.add_parser("report", help="assemble eval outputs into a method x dataset table")
    rp.add_argument("--metrics", nargs="+", required=True)
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "size", None) == 0:
        args.size = None
    torch.manual_seed(getattr(args, "seed", 0))
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, ImageError, CheckpointError, PyramidError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
