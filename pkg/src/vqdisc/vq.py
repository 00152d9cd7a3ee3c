"""Per-stage codebooks: nearest-codeword quantization with straight-through
gradients, the EMA codeword refresh, and the KLD-to-uniform usage regularizer.

The codebook is never trained by gradient descent; the EMA recursion is the
authoritative update path.  The distribution loss is made differentiable by
evaluating it on a soft (temperature-softmax) assignment, while the discrete
EMA-count distribution feeds diagnostics and dead-code reseeding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Var, straight_through

_CHUNK = 2048  # feature rows per distance block


@dataclass
class VqLossConfig:
    alpha: float = 0.25   # commitment weight
    beta: float = 0.05    # distribution (KLD) weight
    tau: float = 0.1      # soft-assignment temperature

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")


@dataclass
class Codebook:
    """N x K codewords plus the EMA state that produces them.

    After every EMA update, ``vectors[n] == ema_sum[n] / (ema_count[n] + eps)``
    holds exactly for all n.
    """

    vectors: np.ndarray          # (N, K)
    ema_count: np.ndarray        # (N,)
    ema_sum: np.ndarray          # (N, K)
    gamma: float = 0.99
    eps: float = 1e-5

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        self.ema_count = np.asarray(self.ema_count, dtype=np.float32)
        self.ema_sum = np.asarray(self.ema_sum, dtype=np.float32)
        n, k = self.vectors.shape
        if n < 2:
            raise ValueError("codebook needs at least 2 codewords")
        if self.ema_count.shape != (n,) or self.ema_sum.shape != (n, k):
            raise ValueError("EMA state shapes do not match vectors")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def from_samples(cls, samples: np.ndarray, n: int, rng: np.random.Generator,
                     gamma: float = 0.99, eps: float = 1e-5) -> "Codebook":
        """Initialize codewords from feature rows sampled without replacement.

        EMA state starts at pseudo-count 1 per codeword so the
        vectors == ema_sum/(ema_count+eps) identity holds from birth.
        """
        samples = np.asarray(samples, dtype=np.float32)
        if samples.shape[0] < n:
            idx = rng.integers(0, samples.shape[0], size=n)
        else:
            idx = rng.choice(samples.shape[0], size=n, replace=False)
        vectors = samples[idx].copy()
        count = np.ones(n, dtype=np.float32)
        return cls(vectors=vectors,
                   ema_count=count,
                   ema_sum=vectors * (1.0 + eps),
                   gamma=gamma, eps=eps)


@dataclass
class AssignResult:
    indices: np.ndarray      # (M,) int32 in [0, N)
    quantized: np.ndarray    # (M, K) = vectors[indices]
    batch_hist: np.ndarray   # (N,) usage counts, sums to M
    soft_assign: np.ndarray  # (M, N), rows sum to 1
    feature_sums: np.ndarray = field(default=None)  # (N, K) sums of assigned rows


def _sq_distances(feats: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Exact per-pair squared L2 distances, chunk-free (caller chunks rows)."""
    diff = feats[:, None, :] - vectors[None, :, :]
    return np.einsum("mnk,mnk->mn", diff, diff)


def nearest_codeword(feats: np.ndarray, cb: Codebook,
                     tau: float = 0.1) -> AssignResult:
    """Assign each feature row to its nearest codeword (ties -> lowest index).

    Also returns the temperature-softmax soft assignment over codewords,
    used by the differentiable distribution loss.
    """
    feats = np.asarray(feats, dtype=np.float32)
    if feats.ndim != 2 or feats.shape[1] != cb.dim:
        raise ValueError(
            f"features {feats.shape} do not match codebook dim {cb.dim}")
    m, n = feats.shape[0], cb.size
    indices = np.empty(m, dtype=np.int32)
    soft = np.empty((m, n), dtype=np.float32)
    for s in range(0, m, _CHUNK):
        block = feats[s:s + _CHUNK]
        d2 = _sq_distances(block, cb.vectors)
        indices[s:s + _CHUNK] = np.argmin(d2, axis=1)
        z = -d2 / tau
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        soft[s:s + _CHUNK] = e / e.sum(axis=1, keepdims=True)
    hist = np.bincount(indices, minlength=n).astype(np.float32)
    sums = np.zeros((n, cb.dim), dtype=np.float32)
    np.add.at(sums, indices, feats)
    return AssignResult(indices=indices,
                        quantized=cb.vectors[indices],
                        batch_hist=hist,
                        soft_assign=soft,
                        feature_sums=sums)


def quantize_ste(tape: Tape, f: Var, cb: Codebook,
                 tau: float = 0.1) -> tuple[Var, AssignResult]:
    """Quantize a (M,K) feature Var; forward emits the nearest codewords,
    backward copies the downstream gradient to f verbatim.  The codebook
    receives no gradient through this path."""
    assign = nearest_codeword(f.data, cb, tau=tau)
    return straight_through(tape, f, assign.quantized), assign


def ema_update(cb: Codebook, assign: AssignResult) -> None:
    """One epoch of the count/sum recursions followed by the codeword refresh.

    counts <- gamma*counts + (1-gamma)*hist
    sums   <- gamma*sums   + (1-gamma)*assigned-feature-sums
    vectors = sums / (counts + eps)
    """
    g = np.float32(cb.gamma)
    cb.ema_count = g * cb.ema_count + (1.0 - g) * assign.batch_hist
    cb.ema_sum = g * cb.ema_sum + (1.0 - g) * assign.feature_sums
    cb.vectors = cb.ema_sum / (cb.ema_count + cb.eps)[:, None]


def merge_assign_stats(parts: list[AssignResult]) -> AssignResult:
    """Combine batch histograms/sums accumulated over an epoch into one
    AssignResult suitable for ema_update (indices/soft fields are dropped)."""
    hist = np.sum([p.batch_hist for p in parts], axis=0)
    sums = np.sum([p.feature_sums for p in parts], axis=0)
    return AssignResult(indices=None, quantized=None, batch_hist=hist,
                        soft_assign=None, feature_sums=sums)


def kld_uniform(p_c: np.ndarray) -> float:
    """KL divergence of a usage distribution from uniform: -H(p) + ln N.

    Zero-probability entries contribute nothing to the entropy.
    """
    p = np.asarray(p_c, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probabilities must be >= 0")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
    nz = p[p > 0]
    h = -float(np.sum(nz * np.log(nz)))
    return float(np.log(p.size) - h)


def perplexity(usage: np.ndarray) -> float:
    """exp(H(usage)): the effective number of active codewords, in [1, N]."""
    p = np.asarray(usage, dtype=np.float64)
    total = p.sum()
    if total <= 0:
        return 1.0
    p = p / total
    nz = p[p > 0]
    return float(np.exp(-np.sum(nz * np.log(nz))))


def soft_kld_loss(tape: Tape, f: Var, vectors: Var, tau: float) -> tuple[Var, np.ndarray]:
    """Differentiable distribution loss on the soft-assignment usage.

    p_hat = column mean of softmax(-||f_m - c_n||^2 / tau); returns
    (-H(p_hat) + ln N) as a scalar Var with gradients to both f and the
    codeword Var, plus p_hat itself for diagnostics.
    """
    feats, cws = f.data, vectors.data
    m, n = feats.shape[0], cws.shape[0]
    d2 = _sq_distances(feats, cws)
    z = -d2 / tau
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    soft = e / e.sum(axis=1, keepdims=True)
    p_hat = soft.mean(axis=0)
    nz = p_hat[p_hat > 0]
    out = Var(np.log(n) + np.sum(nz * np.log(nz)))

    def backward():
        g = out.grad
        if g is None:
            return
        # columns with underflowed usage carry zero soft weight, so any
        # finite stand-in for log(0) is multiplied away
        gp = (np.log(np.maximum(p_hat, 1e-300)) + 1.0) / m
        inner = soft * (gp - (soft * gp).sum(axis=1, keepdims=True))
        gd2 = -(inner / tau) * g                  # dL/d d2[m,n]
        rs = gd2.sum(axis=1, keepdims=True)
        cs = gd2.sum(axis=0)[:, None]
        f.accum((2.0 * (feats * rs - gd2 @ cws)).astype(f.data.dtype))
        vectors.accum((2.0 * (cws * cs - gd2.T @ feats)).astype(vectors.data.dtype))

    tape.record(backward)
    return out, p_hat.astype(np.float64)


def reseed_dead_codes(cb: Codebook, feat_batch: np.ndarray, threshold: float,
                      rng: np.random.Generator) -> int:
    """Replace codewords whose EMA count fell below ``threshold`` with
    features sampled uniformly from the batch.  Returns how many were hit."""
    feat_batch = np.asarray(feat_batch, dtype=np.float32)
    if feat_batch.shape[0] == 0:
        raise ValueError("reseed requires a nonempty feature batch")
    dead = np.flatnonzero(cb.ema_count < threshold)
    for n in dead:
        row = feat_batch[rng.integers(0, feat_batch.shape[0])]
        cb.ema_count[n] = 1.0
        cb.ema_sum[n] = row
        cb.vectors[n] = cb.ema_sum[n] / (cb.ema_count[n] + cb.eps)
    return int(dead.size)


def vq_loss(tape: Tape, f: Var, assign: AssignResult, cb_vectors: Var,
            cfg: VqLossConfig) -> tuple[Var, dict]:
    """Scalar quantization loss: codebook + alpha*commitment + beta*KLD.

    The codebook term ||sg[F] - F_q||^2 is reported but carries no gradient
    (the EMA path owns codeword motion); the commitment term trains the
    encoder toward its codewords; the distribution term penalizes
    non-uniform soft usage.  All terms are means over the M feature rows.
    """
    from .autodiff import row_sq_norm_mean, weighted_sum

    codebook_term = float(
        np.sum((f.data - assign.quantized) ** 2) / f.data.shape[0])
    commit = row_sq_norm_mean(tape, f, assign.quantized)
    kld, p_hat = soft_kld_loss(tape, f, cb_vectors, cfg.tau)
    total = weighted_sum(tape, [commit, kld], [cfg.alpha, cfg.beta])
    # the codebook term contributes to the loss value but not to any gradient
    total.data = total.data + codebook_term
    report = {
        "codebook": codebook_term,
        "commitment": commit.data.item(),
        "kld": kld.data.item(),
        "soft_usage": p_hat,
        "total": total.data.item(),
    }
    return total, report
