"""Hierarchical encoder/decoder with per-stage codebook quantization.

The encoder downsamples three times (patch stacking + linear merge), tapping
a feature grid after each stage's backbone + SNR adaptation.  Each tap is
quantized against its own codebook and only the index grids travel.  The
decoder fuses the three (received) grids at the coarsest resolution and
upsamples back to pixels with non-overlapping transposed convolutions.

The backbone block is a pluggable token mixer; the reference implementation
is a residual two-layer perceptron applied per token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Var
from .modnet import SnrContext, SnrModNet
from .vq import AssignResult, Codebook, quantize_ste

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class CodecConfig:
    height: int = 32
    width: int = 32
    channels: int = 3
    enc_widths: tuple[int, int, int] = (16, 32, 64)
    dec_widths: tuple[int, int, int] = (64, 32, 16)
    codebook_sizes: tuple[int, int, int] = (64, 64, 64)
    block_depth: int = 1
    snr_embed_dim: int = 16

    def __post_init__(self):
        if self.height % 8 or self.width % 8:
            raise ValueError("image extents must be divisible by 8")
        if self.channels != 3:
            raise ValueError("codec is specified for RGB input")
        for n in self.codebook_sizes:
            if n < 2 or n & (n - 1):
                raise ValueError(f"codebook size {n} is not a power of two")
        if self.block_depth < 1:
            raise ValueError("block_depth must be >= 1")

    @property
    def stage_shapes(self) -> list[tuple[int, int]]:
        return [(self.height >> s, self.width >> s) for s in (1, 2, 3)]

    @property
    def stage_tokens(self) -> list[int]:
        return [h * w for h, w in self.stage_shapes]

    @property
    def index_bit_widths(self) -> list[int]:
        return [int(n).bit_length() - 1 for n in self.codebook_sizes]

    @property
    def payload_bits(self) -> int:
        return sum(m * w for m, w in zip(self.stage_tokens,
                                         self.index_bit_widths))

    def config_hash(self) -> int:
        text = "|".join([
            f"{self.height}x{self.width}x{self.channels}",
            "enc=" + ",".join(map(str, self.enc_widths)),
            "dec=" + ",".join(map(str, self.dec_widths)),
            "cb=" + ",".join(map(str, self.codebook_sizes)),
            f"depth={self.block_depth}",
            f"dsnr={self.snr_embed_dim}",
        ])
        return fnv1a64(text)


@dataclass
class IndexBundle:
    """The transmitted payload for one image: per-stage index grids."""

    i1: np.ndarray  # (H/2, W/2) int32
    i2: np.ndarray  # (H/4, W/4) int32
    i3: np.ndarray  # (H/8, W/8) int32
    config_hash: int

    @property
    def grids(self) -> list[np.ndarray]:
        return [self.i1, self.i2, self.i3]

    def validate(self, config: CodecConfig) -> None:
        if self.config_hash != config.config_hash():
            raise ValueError("index bundle was produced by a different model "
                             "configuration")
        for grid, (h, w), n in zip(self.grids, config.stage_shapes,
                                   config.codebook_sizes):
            if grid.shape != (h, w):
                raise ValueError(f"index grid shape {grid.shape} != {(h, w)}")
            if grid.min() < 0 or grid.max() >= n:
                raise ValueError("index out of codebook range")


class BackboneBlock:
    """Residual token MLP: x + W2 relu(W1 x + b1) + b2 per token."""

    def __init__(self, channels: int, rng: np.random.Generator, name: str):
        hidden = 2 * channels
        self.fc1_w = Parameter(rng.standard_normal((channels, hidden))
                               / np.sqrt(channels), f"{name}.fc1.w")
        self.fc1_b = Parameter(np.zeros(hidden), f"{name}.fc1.b")
        self.fc2_w = Parameter(rng.standard_normal((hidden, channels))
                               / np.sqrt(hidden), f"{name}.fc2.w")
        self.fc2_b = Parameter(np.zeros(channels), f"{name}.fc2.b")

    def params(self) -> list[Parameter]:
        return [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]

    def __call__(self, tape: Tape, x: Var) -> Var:
        h = ad.relu(tape, ad.linear(tape, x, self.fc1_w, self.fc1_b))
        return ad.add(tape, x, ad.linear(tape, h, self.fc2_w, self.fc2_b))


class _Stage:
    """One encoder stage: patch stack -> linear merge -> blocks -> modnet."""

    def __init__(self, in_ch: int, out_ch: int, depth: int, d_snr: int,
                 rng: np.random.Generator, name: str):
        self.merge_w = Parameter(rng.standard_normal((4 * in_ch, out_ch))
                                 / np.sqrt(4 * in_ch), f"{name}.merge.w")
        self.merge_b = Parameter(np.zeros(out_ch), f"{name}.merge.b")
        self.blocks = [BackboneBlock(out_ch, rng, f"{name}.block{d}")
                       for d in range(depth)]
        self.modnet = SnrModNet(out_ch, d_snr, rng,
                                f"modnet.enc.{name.split('.')[-1]}")

    def params(self) -> list[Parameter]:
        out = [self.merge_w, self.merge_b]
        for b in self.blocks:
            out += b.params()
        return out + self.modnet.params()

    def __call__(self, tape: Tape, x: Var, ctx: SnrContext) -> Var:
        x = ad.space_to_depth(tape, x, 2)
        x = ad.linear(tape, x, self.merge_w, self.merge_b)
        for block in self.blocks:
            x = block(tape, x)
        return self.modnet(tape, x, ctx)


class Encoder:
    def __init__(self, config: CodecConfig, rng: np.random.Generator):
        widths = config.enc_widths
        ins = (config.channels,) + widths[:2]
        self.stages = [
            _Stage(ins[i], widths[i], config.block_depth,
                   config.snr_embed_dim, rng, f"enc.{i + 1}")
            for i in range(3)
        ]

    def params(self) -> list[Parameter]:
        return [p for s in self.stages for p in s.params()]

    def __call__(self, tape: Tape, images: Var,
                 ctx: SnrContext) -> list[Var]:
        feats = []
        x = images
        for stage in self.stages:
            x = stage(tape, x, ctx)
            feats.append(x)
        return feats


class _UpStage:
    """One decoder stage: x2 transposed conv -> blocks -> modnet."""

    def __init__(self, in_ch: int, out_ch: int, depth: int, d_snr: int,
                 rng: np.random.Generator, name: str):
        self.up_k = Parameter(rng.standard_normal((2, 2, in_ch, out_ch))
                              / np.sqrt(in_ch), f"{name}.up.k")
        self.blocks = [BackboneBlock(out_ch, rng, f"{name}.block{d}")
                       for d in range(depth)]
        self.modnet = SnrModNet(out_ch, d_snr, rng,
                                f"modnet.dec.{name.split('.')[-1]}")

    def params(self) -> list[Parameter]:
        out = [self.up_k]
        for b in self.blocks:
            out += b.params()
        return out + self.modnet.params()

    def __call__(self, tape: Tape, x: Var, ctx: SnrContext) -> Var:
        x = ad.transposed_conv2d(tape, x, self.up_k, 2)
        for block in self.blocks:
            x = block(tape, x)
        return self.modnet(tape, x, ctx)


class Decoder:
    def __init__(self, config: CodecConfig, rng: np.random.Generator):
        c4, c5, c6 = config.dec_widths
        self.fuse_w = []
        self.fuse_b = []
        for i, ci in enumerate(config.enc_widths, start=1):
            self.fuse_w.append(Parameter(
                rng.standard_normal((ci, c4)) / np.sqrt(ci), f"fuse.{i}.w"))
            self.fuse_b.append(Parameter(np.zeros(c4), f"fuse.{i}.b"))
        chain = [(c4, c5), (c5, c6), (c6, c6)]
        self.stages = [
            _UpStage(i, o, config.block_depth, config.snr_embed_dim, rng,
                     f"dec.{k + 1}")
            for k, (i, o) in enumerate(chain)
        ]
        self.out_w = Parameter(rng.standard_normal((c6, config.channels))
                               / np.sqrt(c6), "out.w")
        self.out_b = Parameter(np.zeros(config.channels), "out.b")

    def params(self) -> list[Parameter]:
        out = []
        for w, b in zip(self.fuse_w, self.fuse_b):
            out += [w, b]
        for s in self.stages:
            out += s.params()
        return out + [self.out_w, self.out_b]

    def fuse(self, tape: Tape, feats: list[Var]) -> Var:
        """Project each stage to the fused width, pool to the coarsest grid,
        and sum elementwise."""
        pooled = []
        for i, f in enumerate(feats):
            proj = ad.linear(tape, f, self.fuse_w[i], self.fuse_b[i])
            factor = 4 >> i  # stage grids sit at H/2, H/4, H/8
            if factor > 1:
                proj = ad.avg_pool2d(tape, proj, factor)
            pooled.append(proj)
        acc = pooled[0]
        for p in pooled[1:]:
            acc = ad.add(tape, acc, p)
        return acc

    def __call__(self, tape: Tape, feats: list[Var],
                 ctx: SnrContext) -> Var:
        x = self.fuse(tape, feats)
        for stage in self.stages:
            x = stage(tape, x, ctx)
        return ad.sigmoid(tape, ad.linear(tape, x, self.out_w, self.out_b))


class CodecModel:
    """Encoder + decoder + per-stage codebooks under one configuration."""

    def __init__(self, config: CodecConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(config, rng)
        self.decoder = Decoder(config, rng)
        self.codebooks: list[Codebook] | None = None

    # -- parameters -------------------------------------------------------

    def params(self) -> list[Parameter]:
        return self.encoder.params() + self.decoder.params()

    def init_codebooks(self, stage_feats: list[np.ndarray],
                       rng: np.random.Generator, gamma: float,
                       eps: float) -> None:
        """Seed each stage's codewords from that stage's feature rows."""
        self.codebooks = [
            Codebook.from_samples(f.reshape(-1, f.shape[-1]), n, rng,
                                  gamma=gamma, eps=eps)
            for f, n in zip(stage_feats, self.config.codebook_sizes)
        ]

    # -- forward pieces ---------------------------------------------------

    def encode(self, tape: Tape, images: np.ndarray,
               ctx: SnrContext) -> list[Var]:
        images = np.asarray(images)
        expected = (self.config.height, self.config.width, self.config.channels)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ValueError(f"images must be (B,{expected[0]},{expected[1]},"
                             f"{expected[2]}), got {images.shape}")
        return self.encoder(tape, ad.constant(images), ctx)

    def quantize(self, tape: Tape, feats: list[Var], tau: float = 0.1
                 ) -> tuple[list[IndexBundle], list[Var], list[AssignResult]]:
        if self.codebooks is None:
            raise RuntimeError("codebooks not initialized")
        chash = self.config.config_hash()
        batch = feats[0].data.shape[0]
        qvars, assigns, index_grids = [], [], []
        for f, cb in zip(feats, self.codebooks):
            b, h, w, c = f.data.shape
            flat = ad.reshape(tape, f, (b * h * w, c))
            q, assign = quantize_ste(tape, flat, cb, tau=tau)
            qvars.append(ad.reshape(tape, q, (b, h, w, c)))
            assigns.append(assign)
            index_grids.append(assign.indices.reshape(b, h, w))
        bundles = [
            IndexBundle(i1=index_grids[0][i], i2=index_grids[1][i],
                        i3=index_grids[2][i], config_hash=chash)
            for i in range(batch)
        ]
        return bundles, qvars, assigns

    def lookup(self, bundles: list[IndexBundle]) -> list[np.ndarray]:
        """Receiver-side table lookup: index grids -> quantized feature grids."""
        if self.codebooks is None:
            raise RuntimeError("codebooks not initialized")
        for b in bundles:
            b.validate(self.config)
        out = []
        for s, cb in enumerate(self.codebooks):
            grids = np.stack([b.grids[s] for b in bundles])
            out.append(cb.vectors[grids])
        return out

    def decode(self, tape: Tape, feats: list[Var], ctx: SnrContext) -> Var:
        return self.decoder(tape, feats, ctx)

    def decode_arrays(self, feats: list[np.ndarray],
                      ctx: SnrContext) -> np.ndarray:
        """Inference decode on plain arrays (receiver side)."""
        tape = Tape()
        out = self.decoder(tape, [ad.constant(f) for f in feats], ctx)
        return out.data

    def reconstruct_from_bundles(self, bundles: list[IndexBundle],
                                 ctx: SnrContext) -> np.ndarray:
        return self.decode_arrays(self.lookup(bundles), ctx)

    # -- persistence ------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {p.name: p.data for p in self.params()}
        if self.codebooks is not None:
            for i, cb in enumerate(self.codebooks, start=1):
                arrays[f"vq.{i}.vectors"] = cb.vectors
                arrays[f"vq.{i}.ema_count"] = cb.ema_count
                arrays[f"vq.{i}.ema_sum"] = cb.ema_sum
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray],
                          gamma: float = 0.99, eps: float = 1e-5) -> None:
        for p in self.params():
            if p.name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {p.name!r}")
            if arrays[p.name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {p.name!r}")
            p.data = arrays[p.name].astype(p.data.dtype).copy()
        if "vq.1.vectors" in arrays:
            self.codebooks = [
                Codebook(vectors=arrays[f"vq.{i}.vectors"].copy(),
                         ema_count=arrays[f"vq.{i}.ema_count"].copy(),
                         ema_sum=arrays[f"vq.{i}.ema_sum"].copy(),
                         gamma=gamma, eps=eps)
                for i in (1, 2, 3)
            ]
