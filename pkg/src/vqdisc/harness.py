"""Experiment harness: run configuration, dataset ingestion, SNR sweeps
through the real modem, codebook-update ablations, and loopback checks.

Configuration files are flat UTF-8 ``key = value`` lines ('#' comments);
unknown keys are rejected and every key has a default.  All emitted CSVs
carry '#' header comments documenting measurement conventions, then a
column row; floats are written with repr so parsing recovers exact values.
"""

from __future__ import annotations

import concurrent.futures
import logging
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .codec import IndexBundle
from .estimator import UPDATE_MODES, VqImageCodec
from .metrics import MetricReport, bcr, ber, default_scales, ms_ssim, psnr
from .phy import (ChannelModel, ComplexFrame, OfdmConfig, apply_channel,
                  indices_to_bits, read_frame, receive_frame,
                  transmit_bundle, write_frame)
from .validation import check_images
from .vq import kld_uniform, perplexity

log = logging.getLogger("vqdisc")

SWEEP_COLUMNS = ("snr_db", "psnr_db", "ms_ssim", "ber", "bcr",
                 "perplexity_1", "perplexity_2", "perplexity_3",
                 "kld_1", "kld_2", "kld_3")
ABLATE_COLUMNS = ("mode",) + SWEEP_COLUMNS[1:]

_CSV_CONVENTIONS = (
    "snr reference: per transmitted time-domain sample, unit nominal signal "
    "power (noise power = 10^(-snr_db/10))",
    "psnr: per-image PSNR on [0,1] range, averaged over images/trials",
    "ms_ssim: dyadic scales chosen by image size (canonical weights "
    "renormalized), luminance at the coarsest scale",
    "perplexity/kld: empirical per-stage codeword usage at this operating "
    "point",
)


# ---------------------------------------------------------------------------
# run configuration

@dataclass
class RunConfig:
    dataset: str = "./data"
    checkpoint: str = "./model.ckpt"
    seed: int = 0
    epochs: int = 300
    batch_size: int = 16
    image_size: int = 32
    enc_widths: tuple = (16, 32, 64)
    dec_widths: tuple = (64, 32, 16)
    codebook_sizes: tuple = (64, 64, 64)
    block_depth: int = 1
    snr_embed_dim: int = 16
    alpha: float = 0.25
    beta: float = 0.05
    tau: float = 0.1
    gamma: float = 0.99
    eps: float = 1e-5
    codebook_update: str = "kld-ema"
    dead_code_threshold: float = 1e-3
    base_lr: float = 2e-4
    min_lr: float = 1e-6
    lr_t_max: int = 300
    weight_decay: float = 1e-4
    clip_norm: float = 5.0
    snr_min_db: float = 0.0
    snr_max_db: float = 15.0
    eval_snr_db: float = 15.0
    train_bit_flips: bool = True
    channel: str = "awgn"
    rayleigh_taps: int = 8
    trials: int = 10
    verbose: bool = False

    def __post_init__(self):
        if self.codebook_update not in UPDATE_MODES:
            raise ValueError(
                f"codebook_update must be one of {UPDATE_MODES}")
        if self.channel not in ("awgn", "rayleigh"):
            raise ValueError("channel must be awgn or rayleigh")


def _parse_value(name: str, kind, raw: str):
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is tuple:
        return tuple(int(p) for p in raw.split(","))
    return raw


def parse_config(path) -> RunConfig:
    """Read a flat key=value file into a RunConfig; unknown keys error."""
    known = {f.name: f.type for f in fields(RunConfig)}
    typemap = {f.name: type(getattr(RunConfig(), f.name))
               for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(
            Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, typemap[key], raw)
    return RunConfig(**values)


def estimator_from_config(cfg: RunConfig) -> VqImageCodec:
    return VqImageCodec(
        image_size=cfg.image_size, enc_widths=cfg.enc_widths,
        dec_widths=cfg.dec_widths, codebook_sizes=cfg.codebook_sizes,
        block_depth=cfg.block_depth, snr_embed_dim=cfg.snr_embed_dim,
        alpha=cfg.alpha, beta=cfg.beta, tau=cfg.tau, gamma=cfg.gamma,
        eps=cfg.eps, codebook_update=cfg.codebook_update,
        dead_code_threshold=cfg.dead_code_threshold, epochs=cfg.epochs,
        batch_size=cfg.batch_size, base_lr=cfg.base_lr, min_lr=cfg.min_lr,
        lr_t_max=cfg.lr_t_max, weight_decay=cfg.weight_decay,
        clip_norm=cfg.clip_norm, snr_min_db=cfg.snr_min_db,
        snr_max_db=cfg.snr_max_db, eval_snr_db=cfg.eval_snr_db,
        train_bit_flips=cfg.train_bit_flips, seed=cfg.seed,
        verbose=cfg.verbose)


# ---------------------------------------------------------------------------
# dataset

_IMAGE_SUFFIXES = {".png", ".ppm"}


def load_dataset(path, image_size: int) -> np.ndarray:
    """Load every PNG/PPM under ``path`` (lexicographic order) as float32
    RGB in [0,1], center-cropped square and nearest-resized.  Unreadable
    files are skipped with a warning; an empty result is an error."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {path!r} does not exist")
    files = sorted(p for p in root.iterdir()
                   if p.suffix.lower() in _IMAGE_SUFFIXES)
    images = []
    for f in files:
        try:
            with Image.open(f) as im:
                arr = np.asarray(im.convert("RGB"))
        except Exception as exc:  # corrupt file: skip, keep going
            log.warning("skipping unreadable image %s (%s)", f, exc)
            continue
        h, w = arr.shape[:2]
        side = min(h, w)
        top, left = (h - side) // 2, (w - side) // 2
        crop = Image.fromarray(arr[top:top + side, left:left + side])
        resized = crop.resize((image_size, image_size), Image.NEAREST)
        images.append(np.asarray(resized, dtype=np.float32) / 255.0)
    if not images:
        raise ValueError(f"no readable images in {path!r}")
    return np.stack(images)


def write_ppm(path, image: np.ndarray) -> None:
    """Write an HxWx3 [0,1] array as binary PPM (P6, 8-bit)."""
    data = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def make_corpus(directory, n_images: int, image_size: int, seed: int = 0,
                imbalanced: bool = False) -> None:
    """Generate a deterministic synthetic mini-corpus of PPM images.

    ``imbalanced=True`` makes most images near-constant with a small
    textured minority, producing a skewed feature distribution (useful for
    codebook-usage ablations)."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size] / image_size
    for i in range(n_images):
        kind = rng.integers(0, 4)
        if imbalanced and rng.random() < 0.85:
            base = rng.random(3) * 0.6 + 0.2
            img = np.broadcast_to(base, (image_size, image_size, 3)).copy()
            img += rng.normal(0, 0.01, img.shape)
        elif kind == 0:   # oriented ramp
            theta = rng.random() * 2 * np.pi
            ramp = xx * np.cos(theta) + yy * np.sin(theta)
            ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-9)
            img = np.stack([ramp * rng.random() + rng.random() * 0.3
                            for _ in range(3)], axis=-1)
        elif kind == 1:   # sinusoid texture
            fx, fy = rng.integers(1, 5, size=2)
            phase = rng.random(3) * 2 * np.pi
            img = np.stack([
                0.5 + 0.4 * np.sin(2 * np.pi * (fx * xx + fy * yy) + p)
                for p in phase], axis=-1)
        elif kind == 2:   # random blocks
            cells = rng.random((4, 4, 3))
            img = np.kron(cells, np.ones((image_size // 4,
                                          image_size // 4, 1)))
        else:             # smooth blob
            cx, cy = rng.random(2)
            r2 = (xx - cx) ** 2 + (yy - cy) ** 2
            blob = np.exp(-r2 / (0.05 + rng.random() * 0.2))
            img = np.stack([blob * c for c in rng.random(3)], axis=-1)
        write_ppm(root / f"img_{i:04d}.ppm", np.clip(img, 0.0, 1.0))


# ---------------------------------------------------------------------------
# CSV plumbing

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, columns, rows, comments=()) -> None:
    lines = [f"# {c}" for c in comments]
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    columns, rows = None, []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        if columns is None:
            columns = line.split(",")
        else:
            rows.append(line.split(","))
    if columns is None:
        raise ValueError(f"{path}: no header row")
    return columns, rows


# ---------------------------------------------------------------------------
# commands

def train_run(cfg: RunConfig) -> VqImageCodec:
    """Train per config, write the checkpoint, return the fitted codec."""
    images = load_dataset(cfg.dataset, cfg.image_size)
    est = estimator_from_config(cfg)
    est.fit(images)
    est.save(cfg.checkpoint)
    return est


def _usage_stats(bundles: list[IndexBundle], sizes) -> tuple[tuple, tuple]:
    perps, klds = [], []
    for s, n in enumerate(sizes):
        hist = np.zeros(n)
        for b in bundles:
            hist += np.bincount(b.grids[s].reshape(-1), minlength=n)
        perps.append(perplexity(hist))
        klds.append(kld_uniform(hist / hist.sum()))
    return tuple(perps), tuple(klds)


def _sweep_one_trial(est, images, bundles, tx_bits, snr_db, channel_kind,
                     rayleigh_taps, rng) -> tuple[float, float, float]:
    """One pass of every image through the real modem at one SNR; returns
    (mean psnr, mean ms_ssim, ber)."""
    ofdm = OfdmConfig()
    ch = ChannelModel(channel_kind, snr_db=snr_db, n_taps=rayleigh_taps)
    rx_bundles = []
    errors = 0
    total = 0
    for bundle, bits in zip(bundles, tx_bits):
        frame = transmit_bundle(bundle, est.config_, ofdm)
        rx = ComplexFrame(samples=apply_channel(frame.samples, ch, rng),
                          payload_bits=frame.payload_bits,
                          pad_bits=frame.pad_bits,
                          config_hash=frame.config_hash)
        rx_bundle, rx_bits = receive_frame(rx, est.config_, ofdm)
        rx_bundles.append(rx_bundle)
        errors += int(np.sum(rx_bits != bits))
        total += len(bits)
    recon = est.decode_bundles(rx_bundles, snr_db=snr_db)
    scales = default_scales(est.config_.height, est.config_.width)
    psnrs = [psnr(a, b) for a, b in zip(images, recon)]
    ssims = [ms_ssim(a, b, scales=scales) for a, b in zip(images, recon)]
    return float(np.mean(psnrs)), float(np.mean(ssims)), errors / total


def sweep_snr(est: VqImageCodec, images: np.ndarray, snr_list,
              channel_kind: str = "awgn", trials: int = 10, seed: int = 0,
              rayleigh_taps: int = 8, threads: int | None = None
              ) -> list[MetricReport]:
    """Full digital chain per SNR point, averaged over images and trials."""
    images = check_images(images, est.config_.height)
    if threads is None:
        threads = int(os.environ.get("VQDISC_THREADS", "1"))
    cfg = est.config_
    rate = bcr(cfg.payload_bits, cfg.height, cfg.width, cfg.channels)
    reports = []
    for si, snr_db in enumerate(snr_list):
        bundles = est.encode_bundles(images, snr_db=snr_db)
        tx_bits = [indices_to_bits(b, cfg) for b in bundles]
        perps, klds = _usage_stats(bundles, cfg.codebook_sizes)

        def run(trial, _si=si, _snr=snr_db, _b=bundles, _bits=tx_bits):
            rng = np.random.default_rng([seed, _si, trial])
            return _sweep_one_trial(est, images, _b, _bits, _snr,
                                    channel_kind, rayleigh_taps, rng)
        if threads > 1:
            with concurrent.futures.ThreadPoolExecutor(threads) as pool:
                outcomes = list(pool.map(run, range(trials)))
        else:
            outcomes = [run(t) for t in range(trials)]
        psnrs, ssims, bers = zip(*outcomes)
        reports.append(MetricReport(
            snr_db=float(snr_db), psnr_db=float(np.mean(psnrs)),
            ms_ssim=float(np.mean(ssims)), ber=float(np.mean(bers)),
            bcr=rate, perplexity=perps, kld=klds))
    return reports


def reports_to_rows(reports: list[MetricReport]) -> list[list]:
    return [[r.snr_db, r.psnr_db, r.ms_ssim, r.ber, r.bcr,
             *r.perplexity, *r.kld] for r in reports]


def write_sweep_csv(path, reports: list[MetricReport],
                    extra_comments=()) -> None:
    write_csv(path, SWEEP_COLUMNS, reports_to_rows(reports),
              comments=tuple(extra_comments) + _CSV_CONVENTIONS)


def evaluate_loopback(est: VqImageCodec, images: np.ndarray,
                      snr_db: float) -> dict:
    """Identity-channel metrics (quantization-only distortion)."""
    images = check_images(images, est.config_.height)
    bundles = est.encode_bundles(images, snr_db=snr_db)
    recon = est.decode_bundles(bundles, snr_db=snr_db)
    scales = default_scales(est.config_.height, est.config_.width)
    perps, klds = _usage_stats(bundles, est.config_.codebook_sizes)
    return {
        "psnr_db": float(np.mean([psnr(a, b)
                                  for a, b in zip(images, recon)])),
        "ms_ssim": float(np.mean([ms_ssim(a, b, scales=scales)
                                  for a, b in zip(images, recon)])),
        "perplexity": perps,
        "kld": klds,
    }


def ablate_codebook(cfg: RunConfig, out_dir) -> dict[str, dict]:
    """Train one model per codebook-update mode from a shared seed and
    report final loopback metrics; one CSV per mode plus a summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = load_dataset(cfg.dataset, cfg.image_size)
    codec_cfg = estimator_from_config(cfg)._codec_config()
    rate = bcr(codec_cfg.payload_bits, codec_cfg.height, codec_cfg.width,
               codec_cfg.channels)
    results = {}
    for mode in UPDATE_MODES:
        mode_cfg = replace(cfg, codebook_update=mode,
                           checkpoint=str(out / f"{mode}.ckpt"))
        est = estimator_from_config(mode_cfg)
        est.fit(images)
        est.save(mode_cfg.checkpoint)
        stats = evaluate_loopback(est, images, cfg.eval_snr_db)
        results[mode] = stats
        row = [mode, stats["psnr_db"], stats["ms_ssim"], 0.0, rate,
               *stats["perplexity"], *stats["kld"]]
        write_csv(out / f"{mode}.csv", ABLATE_COLUMNS, [row],
                  comments=(f"codebook update mode: {mode}",)
                  + _CSV_CONVENTIONS)
    rows = [[m, results[m]["psnr_db"], results[m]["ms_ssim"], 0.0, rate,
             *results[m]["perplexity"], *results[m]["kld"]]
            for m in UPDATE_MODES]
    write_csv(out / "summary.csv", ABLATE_COLUMNS, rows,
              comments=("one row per codebook update mode",)
              + _CSV_CONVENTIONS)
    return results


def loopback_run(est: VqImageCodec, image: np.ndarray, snr_db: float,
                 frame_path=None) -> dict:
    """One image through the identity-channel digital chain; verifies the
    payload survives bit-exactly and the reconstruction matches the direct
    decoder output bit-for-bit.  Optionally round-trips the frame file."""
    images = check_images(image, est.config_.height)
    ofdm = OfdmConfig()
    bundle = est.encode_bundles(images, snr_db=snr_db)[0]
    tx_bits = indices_to_bits(bundle, est.config_)
    frame = transmit_bundle(bundle, est.config_, ofdm)
    if frame_path is not None:
        write_frame(frame_path, frame)
        frame = read_frame(frame_path)
    rx_bundle, rx_bits = receive_frame(frame, est.config_, ofdm)
    direct = est.decode_bundles([bundle], snr_db=snr_db)
    via_chain = est.decode_bundles([rx_bundle], snr_db=snr_db)
    scales = default_scales(est.config_.height, est.config_.width)
    return {
        "indices_exact": all(np.array_equal(a, b) for a, b in
                             zip(bundle.grids, rx_bundle.grids)),
        "image_bit_exact": bool(np.array_equal(direct, via_chain)),
        "ber": ber(tx_bits, rx_bits),
        "psnr_db": psnr(images[0], via_chain[0]),
        "ms_ssim": ms_ssim(images[0], via_chain[0], scales=scales),
        "bcr": bcr(est.config_.payload_bits, est.config_.height,
                   est.config_.width, est.config_.channels),
        "payload_bits": est.config_.payload_bits,
    }
