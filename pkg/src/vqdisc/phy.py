"""Digital transmission chain: index/bit serialization, QPSK, OFDM framing
with 802.11a numerology, AWGN/Rayleigh channels, and LS/ZF reception.

Conventions (documented here and in every emitted CSV header):
  * SNR is referenced per transmitted time-domain sample with nominal unit
    signal power; noise power sigma^2 = 10^(-snr_db/10).
  * Occupied subcarriers are scaled by sqrt(fft/occupied), so every OFDM
    symbol core (the 64 IFFT samples) has exactly unit mean power for the
    unit-modulus constellations used here.
  * Detector-referenced Eb/N0 credits back pilot/guard/CP overhead; it is
    what uncoded QPSK BER theory must be compared against.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import CodecConfig, IndexBundle

FRAME_MAGIC = b"VQFRM1"


class FramingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# OFDM numerology (802.11a)

_PILOT_SUBCARRIERS = (-21, -7, 7, 21)
_PILOT_PATTERN = (1.0, 1.0, 1.0, -1.0)
_GUARD = {0}  # DC unused; bins beyond +-26 are the guard band

# long-training values on logical subcarriers -26..-1, 1..26
_TRAIN = np.array(
    [1, 1, -1, -1, 1, 1, -1, 1, -1, 1, 1, 1, 1, 1, 1, -1, -1, 1, 1, -1,
     1, -1, 1, 1, 1, 1,
     1, -1, -1, 1, 1, -1, 1, -1, 1, -1, -1, -1, -1, -1, 1, 1, -1, -1, 1,
     -1, 1, -1, 1, 1, 1, 1], dtype=np.float64)


@dataclass(frozen=True)
class OfdmConfig:
    fft_size: int = 64
    cyclic_prefix: int = 16
    preamble_symbols: int = 2

    def __post_init__(self):
        if self.fft_size != 64 or self.cyclic_prefix != 16:
            raise ValueError("only the 802.11a 64/16 numerology is supported")

    @property
    def data_subcarriers(self) -> np.ndarray:
        subs = [k for k in range(-26, 27)
                if k != 0 and k not in _PILOT_SUBCARRIERS]
        return np.array(subs)

    @property
    def pilot_subcarriers(self) -> np.ndarray:
        return np.array(_PILOT_SUBCARRIERS)

    @property
    def n_data(self) -> int:
        return len(self.data_subcarriers)  # 48

    @property
    def n_occupied(self) -> int:
        return self.n_data + len(_PILOT_SUBCARRIERS)  # 52

    @property
    def symbol_len(self) -> int:
        return self.fft_size + self.cyclic_prefix  # 80

    @property
    def bits_per_symbol(self) -> int:
        return 2 * self.n_data  # 96 payload bits per OFDM symbol

    @property
    def scale(self) -> float:
        # unit mean power over each 64-sample IFFT core
        return math.sqrt(self.fft_size / self.n_occupied)

    def bins(self, subcarriers: np.ndarray) -> np.ndarray:
        return np.where(subcarriers >= 0, subcarriers,
                        self.fft_size + subcarriers)


@dataclass
class ComplexFrame:
    """Baseband samples plus the header needed to invert the framing."""

    samples: np.ndarray      # complex, preamble + payload symbols
    payload_bits: int        # bit count before padding
    pad_bits: int            # zeros appended to fill the last OFDM symbol
    config_hash: int         # codec configuration that produced the payload


@dataclass
class ChannelModel:
    """AWGN or frequency-selective Rayleigh with per-frame random taps."""

    kind: str = "awgn"
    snr_db: float = 10.0
    n_taps: int = 8
    delay_decay: float = 3.0

    def __post_init__(self):
        if self.kind not in ("awgn", "rayleigh"):
            raise ValueError(f"unknown channel kind {self.kind!r}")
        if self.n_taps < 1:
            raise ValueError("n_taps must be >= 1")

    @property
    def noise_power(self) -> float:
        return 0.0 if np.isinf(self.snr_db) else 10.0 ** (-self.snr_db / 10.0)

    def draw_taps(self, rng: np.random.Generator) -> np.ndarray:
        """i.i.d. complex Gaussian taps under an exponential power-delay
        profile normalized to unit average energy."""
        profile = np.exp(-np.arange(self.n_taps) / self.delay_decay)
        profile /= profile.sum()
        taps = (rng.standard_normal(self.n_taps)
                + 1j * rng.standard_normal(self.n_taps))
        return taps * np.sqrt(profile / 2.0)


def apply_channel(samples: np.ndarray, ch: ChannelModel,
                  rng: np.random.Generator,
                  taps: np.ndarray | None = None) -> np.ndarray:
    """Push samples through the channel.  Rayleigh: causal FIR convolution
    with per-frame taps, then AWGN.  Deterministic under a seeded rng."""
    x = np.asarray(samples, dtype=np.complex128)
    if ch.kind == "rayleigh":
        if taps is None:
            taps = ch.draw_taps(rng)
        x = np.convolve(x, taps)[:len(x)]
    sigma2 = ch.noise_power
    if sigma2 > 0:
        noise = (rng.standard_normal(len(x))
                 + 1j * rng.standard_normal(len(x)))
        x = x + noise * math.sqrt(sigma2 / 2.0)
    return x


# ---------------------------------------------------------------------------
# bits <-> indices

def indices_to_bits(bundle: IndexBundle, config: CodecConfig) -> np.ndarray:
    """Fixed-width big-endian serialization, stages concatenated in order."""
    bundle.validate(config)
    parts = []
    for grid, width in zip(bundle.grids, config.index_bit_widths):
        flat = grid.reshape(-1).astype(np.uint32)
        shifts = np.arange(width - 1, -1, -1, dtype=np.uint32)
        parts.append(((flat[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1))
    return np.concatenate(parts)


def bits_to_indices(bits: np.ndarray, config: CodecConfig) -> IndexBundle:
    """Inverse of indices_to_bits; corrupted bits decode to whatever index
    the bits spell (always in range because widths are exact)."""
    bits = np.asarray(bits, dtype=np.uint8)
    if len(bits) != config.payload_bits:
        raise FramingError(
            f"got {len(bits)} payload bits, config expects {config.payload_bits}")
    grids = []
    off = 0
    for (h, w), width in zip(config.stage_shapes, config.index_bit_widths):
        n = h * w * width
        chunk = bits[off:off + n].reshape(h * w, width).astype(np.int32)
        weights = (1 << np.arange(width - 1, -1, -1)).astype(np.int32)
        grids.append((chunk @ weights).reshape(h, w))
        off += n
    return IndexBundle(i1=grids[0], i2=grids[1], i3=grids[2],
                       config_hash=config.config_hash())


def flip_bits(bits: np.ndarray, p: float,
              rng: np.random.Generator) -> np.ndarray:
    """Independent bit flips with probability p (training-time channel
    surrogate; evaluation always runs the real modem)."""
    if p <= 0:
        return bits.copy()
    flips = rng.random(len(bits)) < p
    return np.bitwise_xor(bits, flips.astype(np.uint8))


def flip_index_bits(indices: np.ndarray, width: int, p: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Apply independent bit flips to fixed-width serialized indices and
    return the indices the corrupted bits spell (always in range)."""
    if p <= 0:
        return indices.copy()
    flat = indices.reshape(-1).astype(np.int64)
    shifts = np.arange(width - 1, -1, -1)
    bits = ((flat[:, None] >> shifts) & 1).astype(np.uint8)
    bits ^= (rng.random(bits.shape) < p).astype(np.uint8)
    weights = (1 << shifts).astype(np.int64)
    return (bits.astype(np.int64) @ weights).reshape(indices.shape)


# ---------------------------------------------------------------------------
# QPSK

def qpsk_map(bits: np.ndarray) -> np.ndarray:
    """Pairs of bits to unit-power symbols: first bit drives I, second Q,
    bit 0 -> -1 and bit 1 -> +1, scaled by 1/sqrt(2)."""
    bits = np.asarray(bits, dtype=np.uint8)
    if len(bits) % 2:
        raise ValueError("qpsk_map requires an even bit count")
    levels = 2.0 * bits.astype(np.float64) - 1.0
    return (levels[0::2] + 1j * levels[1::2]) / math.sqrt(2.0)


def qpsk_demap(symbols: np.ndarray) -> np.ndarray:
    """Hard decisions by sign; exact zeros demap to bit 0."""
    symbols = np.asarray(symbols)
    out = np.empty(2 * len(symbols), dtype=np.uint8)
    out[0::2] = symbols.real > 0
    out[1::2] = symbols.imag > 0
    return out


# ---------------------------------------------------------------------------
# OFDM framing

def _preamble_spectrum(cfg: OfdmConfig) -> np.ndarray:
    spec = np.zeros(cfg.fft_size, dtype=np.complex128)
    subs = np.array([k for k in range(-26, 27) if k != 0])
    spec[cfg.bins(subs)] = _TRAIN * cfg.scale
    return spec


def _symbol_to_time(spec: np.ndarray, cfg: OfdmConfig) -> np.ndarray:
    core = np.fft.ifft(spec, norm="ortho")
    return np.concatenate([core[-cfg.cyclic_prefix:], core])


def ofdm_modulate(symbols: np.ndarray, cfg: OfdmConfig) -> np.ndarray:
    """Data symbols (count a multiple of 48) to time samples: preamble plus
    one 80-sample symbol per 48 inputs, pilots on +-7/+-21."""
    symbols = np.asarray(symbols, dtype=np.complex128)
    if len(symbols) % cfg.n_data:
        raise FramingError(
            f"symbol count {len(symbols)} is not a multiple of {cfg.n_data}")
    data_bins = cfg.bins(cfg.data_subcarriers)
    pilot_bins = cfg.bins(cfg.pilot_subcarriers)
    pre = _symbol_to_time(_preamble_spectrum(cfg), cfg)
    chunks = [pre] * cfg.preamble_symbols
    for s in range(0, len(symbols), cfg.n_data):
        spec = np.zeros(cfg.fft_size, dtype=np.complex128)
        spec[data_bins] = symbols[s:s + cfg.n_data] * cfg.scale
        spec[pilot_bins] = np.array(_PILOT_PATTERN) * cfg.scale
        chunks.append(_symbol_to_time(spec, cfg))
    return np.concatenate(chunks)


def _split_symbols(samples: np.ndarray, cfg: OfdmConfig) -> np.ndarray:
    if len(samples) % cfg.symbol_len:
        raise FramingError(
            f"frame length {len(samples)} is not a multiple of {cfg.symbol_len}")
    blocks = samples.reshape(-1, cfg.symbol_len)[:, cfg.cyclic_prefix:]
    return np.fft.fft(blocks, norm="ortho", axis=1)


def ofdm_demodulate(samples: np.ndarray, cfg: OfdmConfig) -> np.ndarray:
    """Strip CP/FFT and return the data-subcarrier symbols (no equalization);
    exact inverse of ofdm_modulate over the identity channel."""
    spectra = _split_symbols(np.asarray(samples, dtype=np.complex128), cfg)
    if len(spectra) <= cfg.preamble_symbols:
        raise FramingError("frame holds no payload symbols")
    payload = spectra[cfg.preamble_symbols:]
    return (payload[:, cfg.bins(cfg.data_subcarriers)] / cfg.scale).reshape(-1)


@functools.lru_cache(maxsize=4)
def _estimation_operator(cfg: OfdmConfig) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares fit of a CP-length impulse response to the occupied-bin
    LS estimates.  Any physically valid channel (delay spread <= CP) lies in
    this subspace, so the fit is exact while shrinking estimation noise.

    Returns (pinv over occupied bins -> taps, taps -> data-bin gains).
    """
    ref = _preamble_spectrum(cfg)
    occupied_bins = np.flatnonzero(np.abs(ref) > 0)
    taps = np.arange(cfg.cyclic_prefix)
    basis_occ = np.exp(-2j * np.pi * np.outer(occupied_bins, taps)
                       / cfg.fft_size)
    basis_data = np.exp(-2j * np.pi
                        * np.outer(cfg.bins(cfg.data_subcarriers), taps)
                        / cfg.fft_size)
    return np.linalg.pinv(basis_occ), basis_data


def estimate_and_equalize(samples: np.ndarray, cfg: OfdmConfig,
                          csi: np.ndarray | None = None) -> np.ndarray:
    """Per-subcarrier LS channel estimation over the two preamble symbols
    (denoised by fitting a CP-length impulse response), then zero-forcing
    on the data subcarriers.  ``csi`` supplies perfect per-bin gains instead.

    Subcarriers whose estimated gain is below 1e-6 in magnitude are erased
    (returned as exact zeros, which demap to zero bits).
    """
    spectra = _split_symbols(np.asarray(samples, dtype=np.complex128), cfg)
    if len(spectra) <= cfg.preamble_symbols:
        raise FramingError("frame is missing the training preamble")
    data_bins = cfg.bins(cfg.data_subcarriers)
    if csi is None:
        ref = _preamble_spectrum(cfg)
        occupied = np.abs(ref) > 0
        h_ls = (spectra[:cfg.preamble_symbols][:, occupied]
                / ref[occupied]).mean(axis=0)
        to_taps, to_data = _estimation_operator(cfg)
        gains = to_data @ (to_taps @ h_ls)
    else:
        gains = np.asarray(csi, dtype=np.complex128)[data_bins]
    erased = np.abs(gains) < 1e-6
    safe = np.where(erased, 1.0, gains)
    eq = spectra[cfg.preamble_symbols:][:, data_bins] / (safe * cfg.scale)
    eq[:, erased] = 0.0
    return eq.reshape(-1)


def channel_frequency_response(taps: np.ndarray, cfg: OfdmConfig) -> np.ndarray:
    """Per-bin gains of a FIR channel (exact when CP >= tap count)."""
    return np.fft.fft(np.asarray(taps, dtype=np.complex128), n=cfg.fft_size)


# ---------------------------------------------------------------------------
# frame assembly and file format

def build_frame(bits: np.ndarray, cfg: OfdmConfig,
                config_hash: int) -> ComplexFrame:
    """Pad bits to fill whole OFDM symbols (zeros, recorded in the header),
    map to QPSK, and modulate."""
    bits = np.asarray(bits, dtype=np.uint8)
    pad = (-len(bits)) % cfg.bits_per_symbol
    padded = np.concatenate([bits, np.zeros(pad, dtype=np.uint8)])
    samples = ofdm_modulate(qpsk_map(padded), cfg)
    return ComplexFrame(samples=samples, payload_bits=len(bits),
                        pad_bits=pad, config_hash=config_hash)


def recover_bits(frame: ComplexFrame, cfg: OfdmConfig,
                 csi: np.ndarray | None = None) -> np.ndarray:
    """Equalize, demap, and drop the padding recorded in the header."""
    symbols = estimate_and_equalize(frame.samples, cfg, csi=csi)
    return qpsk_demap(symbols)[:frame.payload_bits]


def transmit_bundle(bundle: IndexBundle, codec_cfg: CodecConfig,
                    cfg: OfdmConfig) -> ComplexFrame:
    return build_frame(indices_to_bits(bundle, codec_cfg), cfg,
                       bundle.config_hash)


def receive_frame(frame: ComplexFrame, codec_cfg: CodecConfig,
                  cfg: OfdmConfig,
                  csi: np.ndarray | None = None
                  ) -> tuple[IndexBundle, np.ndarray]:
    if frame.config_hash != codec_cfg.config_hash():
        raise FramingError("frame was produced by a different codec "
                           "configuration")
    bits = recover_bits(frame, cfg, csi=csi)
    return bits_to_indices(bits, codec_cfg), bits


def write_frame(path, frame: ComplexFrame) -> None:
    header = FRAME_MAGIC + struct.pack("<IBQ", frame.payload_bits,
                                       frame.pad_bits, frame.config_hash)
    iq = np.empty(2 * len(frame.samples), dtype="<f4")
    iq[0::2] = frame.samples.real
    iq[1::2] = frame.samples.imag
    Path(path).write_bytes(header + iq.tobytes())


def read_frame(path) -> ComplexFrame:
    blob = Path(path).read_bytes()
    head = len(FRAME_MAGIC) + struct.calcsize("<IBQ")
    if len(blob) < head or not blob.startswith(FRAME_MAGIC):
        raise FramingError(f"{path}: not a frame file")
    payload_bits, pad_bits, config_hash = struct.unpack(
        "<IBQ", blob[len(FRAME_MAGIC):head])
    iq = np.frombuffer(blob[head:], dtype="<f4")
    if len(iq) % 2:
        raise FramingError(f"{path}: odd float count")
    samples = iq[0::2].astype(np.float64) + 1j * iq[1::2].astype(np.float64)
    return ComplexFrame(samples=samples, payload_bits=payload_bits,
                        pad_bits=pad_bits, config_hash=config_hash)


# ---------------------------------------------------------------------------
# BER theory

def qfunc(x: float) -> float:
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def ber_theory_qpsk_awgn(ebn0_db: float) -> float:
    """Uncoded Gray-mapped QPSK over AWGN: Q(sqrt(2 Eb/N0))."""
    return qfunc(math.sqrt(2.0 * 10.0 ** (ebn0_db / 10.0)))


def effective_ebn0_db(snr_db: float, cfg: OfdmConfig) -> float:
    """Detector-referenced Eb/N0 for a per-sample SNR, crediting back the
    pilot/guard subcarrier overhead absorbed by the occupancy scaling."""
    es_n0 = 10.0 ** (snr_db / 10.0) * (cfg.fft_size / cfg.n_occupied)
    return 10.0 * math.log10(es_n0 / 2.0)


def ebn0_from_ber(ber: float) -> float:
    """Invert ber_theory_qpsk_awgn by bisection (valid for ber in (0, 0.5))."""
    if not 0.0 < ber < 0.5:
        raise ValueError("ber must lie strictly between 0 and 0.5")
    lo, hi = -30.0, 30.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if ber_theory_qpsk_awgn(mid) > ber:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
