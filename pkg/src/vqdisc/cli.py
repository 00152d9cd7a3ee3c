"""Command-line interface: train, sweep, ablate, loopback.

Thread count for sweeps comes from the VQDISC_THREADS environment variable
(default 1).  Exit code is 0 on success, nonzero with a message on stderr
on any error.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .estimator import VqImageCodec
from .harness import (ablate_codebook, load_dataset, loopback_run,
                      parse_config, sweep_snr, train_run, write_sweep_csv)


def _cmd_train(args) -> int:
    cfg = parse_config(args.config)
    est = train_run(cfg)
    final = est.history_[-1] if est.history_ else {}
    print(f"trained {cfg.epochs} epochs on {cfg.dataset}; "
          f"final loss {final.get('loss', float('nan')):.5f}; "
          f"checkpoint -> {cfg.checkpoint}")
    return 0


def _cmd_sweep(args) -> int:
    est = VqImageCodec.load(args.ckpt)
    images = load_dataset(args.dataset, est.config_.height)
    snrs = [float(s) for s in args.snrs.split(",")]
    reports = sweep_snr(est, images, snrs, channel_kind=args.channel,
                        trials=args.trials, seed=args.seed,
                        rayleigh_taps=args.taps)
    write_sweep_csv(args.out, reports,
                    extra_comments=(f"checkpoint: {args.ckpt}",
                                    f"channel: {args.channel}",
                                    f"trials per point: {args.trials}",
                                    f"seed: {args.seed}"))
    for r in reports:
        print(f"snr {r.snr_db:5.1f} dB  psnr {r.psnr_db:6.2f} dB  "
              f"ms-ssim {r.ms_ssim:.4f}  ber {r.ber:.3e}")
    print(f"wrote {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = parse_config(args.config)
    results = ablate_codebook(cfg, args.out_dir)
    for mode, stats in results.items():
        perp = "/".join(f"{p:.1f}" for p in stats["perplexity"])
        print(f"{mode:8s}  psnr {stats['psnr_db']:6.2f} dB  "
              f"ms-ssim {stats['ms_ssim']:.4f}  perplexity {perp}")
    print(f"wrote per-mode CSVs to {args.out_dir}")
    return 0


def _cmd_loopback(args) -> int:
    est = VqImageCodec.load(args.ckpt)
    from PIL import Image

    with Image.open(args.image) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    size = est.config_.height
    if arr.shape[:2] != (size, size):
        h, w = arr.shape[:2]
        side = min(h, w)
        crop = arr[(h - side) // 2:(h - side) // 2 + side,
                   (w - side) // 2:(w - side) // 2 + side]
        arr = np.asarray(Image.fromarray(
            (crop * 255).astype(np.uint8)).resize((size, size),
                                                  Image.NEAREST),
            dtype=np.float32) / 255.0
    report = loopback_run(est, arr, snr_db=args.snr, frame_path=args.frame)
    print(f"payload {report['payload_bits']} bits "
          f"(bcr {report['bcr']:.4f}); ber {report['ber']:.3e}")
    print(f"indices recovered exactly: {report['indices_exact']}")
    print(f"reconstruction bit-exact vs direct decode: "
          f"{report['image_bit_exact']}")
    print(f"psnr {report['psnr_db']:.2f} dB  ms-ssim {report['ms_ssim']:.4f}")
    return 0 if (report["indices_exact"] and report["image_bit_exact"]) else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vqdisc",
        description="Vector-quantized digital semantic image link simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a codec from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sweep", help="metric sweep over SNR points")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--snrs", default="0,3,6,9,12,15",
                   help="comma-separated SNR list in dB")
    p.add_argument("--channel", choices=("awgn", "rayleigh"), default="awgn")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", required=True,
                   help="directory of evaluation images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--taps", type=int, default=8,
                   help="Rayleigh delay taps (ignored for AWGN)")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("ablate",
                       help="compare codebook update modes from one seed")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("loopback",
                       help="identity-channel chain check on one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--snr", type=float, default=15.0,
                   help="conditioning SNR in dB")
    p.add_argument("--frame", default=None,
                   help="also round-trip the frame through this file")
    p.set_defaults(func=_cmd_loopback)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
