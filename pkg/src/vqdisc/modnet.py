"""SNR-conditioned channel attention block.

Inserted after every backbone block: a small net maps the (normalized) link
SNR to an embedding, concatenates it with globally pooled channel statistics,
and predicts a per-channel scaling factor in (0,1).  A 1x1-conv feature
enhancer rides on a residual link after the scaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Var

SNR_NORM_DB = 15.0  # divisor that maps the training range into [0, 1]


@dataclass
class SnrContext:
    """Link quality fed to the adaptation blocks, in dB."""

    snr_db: float

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")

    @property
    def normalized(self) -> float:
        return float(self.snr_db) / SNR_NORM_DB


class SnrModNet:
    """Per-insertion-site adaptation block; no weight sharing across sites."""

    def __init__(self, channels: int, d_snr: int, rng: np.random.Generator,
                 name: str):
        self.channels = channels
        self.d_snr = d_snr

        def init(shape, fan_in, suffix):
            data = rng.standard_normal(shape) / np.sqrt(fan_in)
            return Parameter(data, f"{name}.{suffix}")

        self.snr_w = init((1, d_snr), 1, "snr.w")
        self.snr_b = Parameter(np.zeros(d_snr), f"{name}.snr.b")
        self.factor_w = init((channels + d_snr, channels), channels + d_snr,
                             "factor.w")
        self.factor_b = Parameter(np.zeros(channels), f"{name}.factor.b")
        self.enhance_w = init((channels, channels), channels, "enhance.w")
        self.enhance_b = Parameter(np.zeros(channels), f"{name}.enhance.b")

    def params(self) -> list[Parameter]:
        return [self.snr_w, self.snr_b, self.factor_w, self.factor_b,
                self.enhance_w, self.enhance_b]

    def __call__(self, tape: Tape, x: Var, ctx: SnrContext) -> Var:
        if x.data.shape[-1] != self.channels:
            raise ValueError(
                f"modnet expects {self.channels} channels, got {x.data.shape[-1]}")
        batch = x.data.shape[0]
        mu = ad.constant(np.full((batch, 1), ctx.normalized))
        s = ad.relu(tape, ad.linear(tape, mu, self.snr_w, self.snr_b))
        g = ad.global_avg_pool(tape, x)
        f = ad.sigmoid(tape, ad.linear(tape, ad.concat_channels(tape, g, s),
                                       self.factor_w, self.factor_b))
        scaled = ad.scale_channels(tape, x, f)
        enhanced = ad.relu(tape, ad.linear(tape, scaled, self.enhance_w,
                                           self.enhance_b))
        return ad.add(tape, scaled, enhanced)


def sample_training_snr(rng: np.random.Generator, low: float = 0.0,
                        high: float = 15.0) -> float:
    """Uniform link SNR draw for a training batch."""
    return float(rng.uniform(low, high))
