"""Vector-quantized digital semantic image transmission.

A trainable hierarchical image codec quantized against per-stage codebooks
(EMA-updated with a KLD-to-uniform usage regularizer), transmitted as index
bits over a QPSK/OFDM link with AWGN or Rayleigh fading, plus the metric
and experiment harness around it.
"""

from .codec import CodecConfig, CodecModel, IndexBundle
from .estimator import VqImageCodec
from .metrics import MetricReport, bcr, ber, ms_ssim, psnr
from .modnet import SnrContext
from .phy import ChannelModel, ComplexFrame, OfdmConfig
from .vq import Codebook, VqLossConfig

__version__ = "0.1.0"

__all__ = [
    "ChannelModel", "Codebook", "CodecConfig", "CodecModel", "ComplexFrame",
    "IndexBundle", "MetricReport", "OfdmConfig", "SnrContext", "VqImageCodec",
    "VqLossConfig", "bcr", "ber", "ms_ssim", "psnr", "__version__",
]
