"""Command-line surface: training, coefficient search, compression,
evaluation, and rate-distortion curve merging.

Every failure exits nonzero with a diagnostic on standard error; all file
writes are whole-file atomic, so no partial outputs are left behind.  The
QRCODEC_SEED environment variable overrides any configured seed.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

import numpy as np

from . import metrics
from .codec import CodecModel, PROFILES, load_checkpoint, save_checkpoint
from .rangecoder import HEADER_SIZE
from .data import (
    ImageBuffer, PatchDataset, atomic_write_bytes, config_hash, load_config,
    load_image_dir, load_ppm, read_csv, resolve_seed, save_ppm, write_csv,
)
from .metrics import RDPoint
from .training import (
    EXPLORE_REPORT_COLUMNS, ExplorationConfig, TrainingConfig, explore_alpha,
    train_predictive_phase, train_soft_phase,
)

RD_COLUMNS = ["image", "q", "model", "bpp", "bpp_total", "psnr", "msssim",
              "msssim_db", "eps_q"]
CURVE_COLUMNS = ["model", "q", "images", "bpp", "psnr", "msssim",
                 "msssim_db", "eps_q"]


def _training_config(args, defaults: dict | None = None) -> TrainingConfig:
    cfg_dict = dict(defaults or {})
    if getattr(args, "config", None):
        cfg_dict.update(load_config(args.config))
    tcfg = TrainingConfig.from_dict(cfg_dict)
    return replace(tcfg, seed=resolve_seed(tcfg.seed))


def _dataset_for(tcfg: TrainingConfig, data_dir: str) -> PatchDataset:
    profile = PROFILES[tcfg.profile]
    return PatchDataset(load_image_dir(data_dir),
                        patch_size=profile.patch_size)


def cmd_train_soft(args) -> int:
    tcfg = _training_config(args)
    if tcfg.phase != "soft":
        raise ValueError(f"config requests phase {tcfg.phase!r}; "
                         f"this command trains the soft phase")
    profile = PROFILES[tcfg.profile]
    model = CodecModel(profile, tcfg.n_qr, np.random.default_rng(tcfg.seed))
    dataset = _dataset_for(tcfg, args.data)
    log_path = args.log or args.out + ".log.csv"
    train_soft_phase(model, dataset, tcfg, log_path=log_path)
    save_checkpoint(model, tcfg.q, args.out)
    print(f"soft checkpoint: {args.out} (log: {log_path})")
    return 0


def cmd_explore_alpha(args) -> int:
    model, quality = load_checkpoint(args.ckpt)
    defaults = {"q": str(quality), "n_qr": str(model.n_qr),
                "profile": model.profile.name, "phase": "predictive"}
    tcfg = _training_config(args, defaults)
    dataset = _dataset_for(tcfg, args.data)
    ecfg = ExplorationConfig()
    best, rows = explore_alpha(model, dataset, ecfg, tcfg)
    comments = [f"config {config_hash(tcfg.as_dict())}", f"seed {tcfg.seed}",
                f"best_alpha {best}"]
    write_csv(args.out, EXPLORE_REPORT_COLUMNS, rows, comments)
    atomic_write_bytes(args.out + ".best",
                       f"alpha = {best}\n".encode("utf-8"))
    print(f"best alpha: {best} (report: {args.out})")
    return 0


def cmd_train_predictive(args) -> int:
    model, quality = load_checkpoint(args.ckpt)
    defaults = {"q": str(quality), "n_qr": str(model.n_qr),
                "profile": model.profile.name, "phase": "predictive"}
    tcfg = replace(_training_config(args, defaults), alpha=args.alpha)
    if tcfg.phase != "predictive":
        raise ValueError(f"config requests phase {tcfg.phase!r}; "
                         f"this command trains the predictive phase")
    dataset = _dataset_for(tcfg, args.data)
    log_path = args.log or args.out + ".log.csv"
    train_predictive_phase(model, dataset, tcfg, log_path=log_path)
    save_checkpoint(model, tcfg.q, args.out)
    print(f"predictive checkpoint: {args.out} (log: {log_path})")
    return 0


def cmd_compress(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    img = load_ppm(args.input)
    blob = model.compress(img.to_unit())
    atomic_write_bytes(args.out, blob)
    pixels = img.width * img.height
    print(f"{args.input}: {len(blob)} bytes "
          f"({8.0 * (len(blob) - HEADER_SIZE) / pixels:.4f} bpp payload)")
    return 0


def cmd_decompress(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    with open(args.input, "rb") as f:
        blob = f.read()
    recon = model.decompress(blob)
    save_ppm(ImageBuffer.from_unit(recon), args.out)
    print(f"{args.out}: {recon.shape[2]}x{recon.shape[1]}")
    return 0


def evaluate_model(model: CodecModel, quality: int,
                   images: list) -> list[RDPoint]:
    """Per-image rate/quality measurements under a frozen model."""
    tag = f"{model.profile.name}-qr{model.n_qr}"
    points = []
    for buf in images:
        unit = buf.to_unit()
        blob = model.compress(unit)
        recon = model.decompress(blob)
        y, y_hat, y_tilde = model.latent_pipeline(unit)
        target = y_tilde if model.n_qr > 0 else y_hat
        raw = metrics.ms_ssim(unit, recon)
        payload = len(blob) - HEADER_SIZE
        points.append(RDPoint(
            image=buf.source or "image",
            q=quality, model=tag,
            bpp=metrics.bpp(payload, buf.width, buf.height),
            bpp_total=metrics.bpp(len(blob), buf.width, buf.height),
            psnr=metrics.psnr(unit, recon),
            msssim=raw, msssim_db=metrics.msssim_db(raw),
            eps_q=metrics.quantization_error(y, target)))
    return points


def cmd_eval(args) -> int:
    model, quality = load_checkpoint(args.ckpt)
    images = load_image_dir(args.data)
    points = evaluate_model(model, quality, images)
    setup = {"ckpt": args.ckpt, "data": args.data,
             "profile": model.profile.name, "n_qr": str(model.n_qr),
             "q": str(quality)}
    comments = [f"config {config_hash(setup)}", f"seed {resolve_seed(0)}"]
    rows = [dict(zip(RD_COLUMNS, p.row())) for p in points]
    write_csv(args.out, RD_COLUMNS, rows, comments)
    mean_bpp = sum(p.bpp for p in points) / len(points)
    mean_psnr = sum(p.psnr for p in points) / len(points)
    print(f"{len(points)} images: mean bpp {mean_bpp:.4f}, "
          f"mean psnr {mean_psnr:.2f} dB -> {args.out}")
    return 0


def cmd_rd_curve(args) -> int:
    groups: dict = {}
    for path in args.evals:
        _, rows = read_csv(path)
        if not rows:
            raise ValueError(f"{path}: no evaluation rows")
        for row in rows:
            key = (row["model"], int(row["q"]))
            groups.setdefault(key, []).append(row)
    curve = []
    for (tag, q) in sorted(groups):
        rows = groups[(tag, q)]
        entry = {"model": tag, "q": q, "images": len(rows)}
        for col in ("bpp", "psnr", "msssim", "msssim_db", "eps_q"):
            entry[col] = sum(float(r[col]) for r in rows) / len(rows)
        curve.append(entry)
    comments = [f"config {config_hash({'evals': ' '.join(args.evals)})}",
                "seed 0"]
    write_csv(args.out, CURVE_COLUMNS, curve, comments)
    print(f"{len(curve)} curve points -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qrcodec",
        description="Learned image codec with a quantization rectifier.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-soft", help="end-to-end noise-relaxed training")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_train_soft)

    p = sub.add_parser("explore-alpha",
                       help="decade-ladder search for the feature coefficient")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_explore_alpha)

    p = sub.add_parser("train-predictive",
                       help="frozen-encoder hard-quantized fine-tuning")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_train_predictive)

    p = sub.add_parser("compress", help="image to bitstream")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="bitstream to image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("eval", help="per-image rate/quality table")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rd-curve", help="merge eval tables into mean points")
    p.add_argument("--evals", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rd_curve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # CLI boundary: every failure becomes exit 1
        print(f"qrcodec: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
