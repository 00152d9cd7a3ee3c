"""Fidelity and efficiency metrics.

All image metrics operate on H x W x C arrays with values in [0, 1]; PSNR
uses the unit dynamic range (equivalent to the 255-range formula on 8-bit
data).  MS-SSIM follows the standard construction: 11x11 Gaussian window
(sigma 1.5), contrast/structure at every scale, luminance at the coarsest,
dyadic average-pool downsampling, and the canonical five-scale weights
renormalized when fewer scales are used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_WINDOW = 11
_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03
_WEIGHTS5 = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass
class MetricReport:
    snr_db: float
    psnr_db: float
    ms_ssim: float
    ber: float
    bcr: float
    perplexity: tuple[float, float, float]
    kld: tuple[float, float, float]


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image extents differ: {a.shape} vs {b.shape}")
    return a, b


def mse(ref: np.ndarray, test: np.ndarray) -> float:
    """Mean squared per-component difference."""
    a, b = _check_pair(ref, test)
    return float(np.mean((a - b) ** 2))


def psnr(ref: np.ndarray, test: np.ndarray) -> float:
    """10*log10(1/mse) on unit dynamic range; identical images give inf."""
    err = mse(ref, test)
    if err == 0.0:
        return float("inf")
    return float(10.0 * math.log10(1.0 / err))


def _gaussian_kernel() -> np.ndarray:
    offsets = np.arange(_WINDOW, dtype=np.float64) - (_WINDOW - 1) / 2.0
    k = np.exp(-(offsets ** 2) / (2.0 * _SIGMA ** 2))
    return k / k.sum()


def _blur_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable valid-mode Gaussian filtering of an (H, W, C) array."""
    out = sliding_window_view(img, _WINDOW, axis=0) @ kernel
    return sliding_window_view(out, _WINDOW, axis=1) @ kernel


def _ssim_components(a: np.ndarray, b: np.ndarray,
                     kernel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel spatial means of the contrast/structure term and of the
    full SSIM (luminance included)."""
    c1 = _K1 ** 2
    c2 = _K2 ** 2
    mu_a = _blur_valid(a, kernel)
    mu_b = _blur_valid(b, kernel)
    var_a = _blur_valid(a * a, kernel) - mu_a ** 2
    var_b = _blur_valid(b * b, kernel) - mu_b ** 2
    cov = _blur_valid(a * b, kernel) - mu_a * mu_b
    cs_map = (2.0 * cov + c2) / (var_a + var_b + c2)
    lum_map = (2.0 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    return cs_map.mean(axis=(0, 1)), (lum_map * cs_map).mean(axis=(0, 1))


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    img = img[:h, :w]
    return img.reshape(h // 2, 2, w // 2, 2, -1).mean(axis=(1, 3))


def default_scales(height: int, width: int) -> int:
    """5 scales for large images, 3 below 176 px, fewer when the window
    no longer fits the coarsest scale."""
    scales = 5 if min(height, width) >= 176 else 3
    while scales > 1 and min(height, width) // 2 ** (scales - 1) < _WINDOW:
        scales -= 1
    return scales


def ms_ssim(ref: np.ndarray, test: np.ndarray, scales: int | None = None) -> float:
    """Multi-scale structural similarity in [0, 1]."""
    a, b = _check_pair(ref, test)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    h, w = a.shape[:2]
    if scales is None:
        scales = default_scales(h, w)
    if min(h, w) // 2 ** (scales - 1) < _WINDOW:
        raise ValueError(
            f"{h}x{w} image is too small for {scales} dyadic scales with an "
            f"{_WINDOW}-tap window")
    weights = np.array(_WEIGHTS5[:scales])
    weights /= weights.sum()
    kernel = _gaussian_kernel()
    per_channel = np.ones(a.shape[2])
    for s in range(scales):
        cs, ssim_full = _ssim_components(a, b, kernel)
        value = ssim_full if s == scales - 1 else cs
        per_channel *= np.maximum(value, 0.0) ** weights[s]
        if s != scales - 1:
            a = _downsample2(a)
            b = _downsample2(b)
    return float(per_channel.mean())


def bcr(payload_bits: int, height: int, width: int, channels: int) -> float:
    """Transmitted payload bits over raw source bits (8 bits per component)."""
    if height <= 0 or width <= 0 or channels <= 0:
        raise ValueError("image extents must be positive")
    return payload_bits / (height * width * channels * 8)


def ber(bits_tx: np.ndarray, bits_rx: np.ndarray) -> float:
    """Hamming distance over length."""
    tx = np.asarray(bits_tx)
    rx = np.asarray(bits_rx)
    if tx.shape != rx.shape:
        raise ValueError("bit streams differ in length")
    if tx.size == 0:
        return 0.0
    return float(np.mean(tx != rx))
