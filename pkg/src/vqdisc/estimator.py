"""Trainable image codec with a scikit-learn estimator surface.

``fit`` trains the encoder/decoder/adaptation weights end to end (with the
straight-through quantizer and the training-time bit-flip channel
surrogate) and refreshes the codebooks by EMA once per epoch.  ``transform``
maps images to the integer index payload that would be transmitted;
``inverse_transform`` rebuilds images from such payloads.  The real
OFDM/channel evaluation chain lives in the harness module.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from .autodiff import Tape, Var
from .checkpoint import load_arrays, pack_u64, save_arrays, unpack_u64
from .codec import CodecConfig, CodecModel, IndexBundle
from .modnet import SnrContext, sample_training_snr
from .optim import AdamW, clip_global_norm, cosine_lr
from .phy import (OfdmConfig, ber_theory_qpsk_awgn, effective_ebn0_db,
                  flip_index_bits)
from .vq import (VqLossConfig, ema_update, merge_assign_stats, perplexity,
                 quantize_ste, reseed_dead_codes, vq_loss)
from .validation import check_images, check_index_matrix, check_snr_db
from .metrics import psnr

UPDATE_MODES = ("kld-ema", "ema", "none")


class VqImageCodec(BaseEstimator, TransformerMixin):
    """Vector-quantized semantic image codec with SNR-conditioned layers.

    Parameters mirror the run configuration; see the package README for the
    file-based interface.  All randomness is derived from ``seed``: two fits
    with identical inputs produce bit-identical models.
    """

    def __init__(self, image_size=32, enc_widths=(16, 32, 64),
                 dec_widths=(64, 32, 16), codebook_sizes=(64, 64, 64),
                 block_depth=1, snr_embed_dim=16, alpha=0.25, beta=0.05,
                 tau=0.1, gamma=0.99, eps=1e-5, codebook_update="kld-ema",
                 dead_code_threshold=1e-3, epochs=300, batch_size=16,
                 base_lr=2e-4, min_lr=1e-6, lr_t_max=300, weight_decay=1e-4,
                 clip_norm=5.0, snr_min_db=0.0, snr_max_db=15.0,
                 eval_snr_db=15.0, train_bit_flips=True, seed=0,
                 verbose=False):
        self.image_size = image_size
        self.enc_widths = enc_widths
        self.dec_widths = dec_widths
        self.codebook_sizes = codebook_sizes
        self.block_depth = block_depth
        self.snr_embed_dim = snr_embed_dim
        self.alpha = alpha
        self.beta = beta
        self.tau = tau
        self.gamma = gamma
        self.eps = eps
        self.codebook_update = codebook_update
        self.dead_code_threshold = dead_code_threshold
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.min_lr = min_lr
        self.lr_t_max = lr_t_max
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.snr_min_db = snr_min_db
        self.snr_max_db = snr_max_db
        self.eval_snr_db = eval_snr_db
        self.train_bit_flips = train_bit_flips
        self.seed = seed
        self.verbose = verbose

    # -- plumbing ----------------------------------------------------------

    def _codec_config(self) -> CodecConfig:
        return CodecConfig(height=self.image_size, width=self.image_size,
                           enc_widths=tuple(self.enc_widths),
                           dec_widths=tuple(self.dec_widths),
                           codebook_sizes=tuple(self.codebook_sizes),
                           block_depth=self.block_depth,
                           snr_embed_dim=self.snr_embed_dim)

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError("this VqImageCodec instance is not fitted")

    @property
    def n_payload_indices_(self) -> int:
        self._check_fitted()
        return sum(self.config_.stage_tokens)

    # -- training ----------------------------------------------------------

    def fit(self, X, y=None):
        if self.codebook_update not in UPDATE_MODES:
            raise ValueError(f"codebook_update must be one of {UPDATE_MODES}")
        X = check_images(X, self.image_size)
        n = X.shape[0]
        config = self._codec_config()
        model = CodecModel(config, seed=self.seed)

        rng_train = np.random.default_rng([self.seed, 1])
        rng_cb = np.random.default_rng([self.seed, 2])
        rng_reseed = np.random.default_rng([self.seed, 3])
        rng_flip = np.random.default_rng([self.seed, 4])

        beta = self.beta if self.codebook_update == "kld-ema" else 0.0
        loss_cfg = VqLossConfig(alpha=self.alpha, beta=beta, tau=self.tau)
        ofdm = OfdmConfig()

        # codebooks start from the first batch's features
        first = X[:min(self.batch_size, n)]
        feats0 = model.encode(Tape(), first, SnrContext(
            0.5 * (self.snr_min_db + self.snr_max_db)))
        model.init_codebooks([f.data for f in feats0], rng_cb,
                             gamma=self.gamma, eps=self.eps)

        opt = AdamW(model.params(), lr=self.base_lr,
                    weight_decay=self.weight_decay)
        history = []
        batch_count = max(1, n // self.batch_size)
        for epoch in range(self.epochs):
            opt.lr = cosine_lr(epoch, self.base_lr, self.min_lr, self.lr_t_max)
            order = rng_train.permutation(n)
            epoch_stats = [[] for _ in range(3)]
            epoch_hist = [np.zeros(c.size) for c in model.codebooks]
            losses = []
            last_feats = None
            for b in range(batch_count):
                batch = X[order[b * self.batch_size:
                                (b + 1) * self.batch_size]]
                mu = sample_training_snr(rng_train, self.snr_min_db,
                                         self.snr_max_db)
                loss_val = self._train_step(
                    model, opt, batch, mu, loss_cfg, ofdm, rng_flip,
                    epoch_stats, epoch_hist)
                if not np.isfinite(loss_val):
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch} batch {b}")
                losses.append(loss_val)
                last_feats = batch  # reseed pool: latest batch re-encoded
            if self.codebook_update != "none":
                reseed_feats = [
                    f.data.reshape(-1, f.data.shape[-1])
                    for f in model.encode(Tape(), last_feats,
                                          SnrContext(self.eval_snr_db))
                ]
                for s, cb in enumerate(model.codebooks):
                    ema_update(cb, merge_assign_stats(epoch_stats[s]))
                    reseed_dead_codes(cb, reseed_feats[s],
                                      self.dead_code_threshold, rng_reseed)
            usage = [perplexity(h) for h in epoch_hist]
            ema_usage = [perplexity(cb.ema_count) for cb in model.codebooks]
            history.append({"epoch": epoch, "loss": float(np.mean(losses)),
                            "lr": opt.lr, "perplexity": usage,
                            "ema_perplexity": ema_usage})
            if self.verbose:
                print(f"epoch {epoch:4d}  loss {history[-1]['loss']:.5f}  "
                      f"lr {opt.lr:.2e}  perplexity "
                      + "/".join(f"{u:.1f}" for u in usage))

        self.config_ = config
        self.model_ = model
        self.history_ = history
        self.config_hash_ = config.config_hash()
        return self

    def _train_step(self, model, opt, batch, mu, loss_cfg, ofdm, rng_flip,
                    epoch_stats, epoch_hist) -> float:
        ctx = SnrContext(mu)
        tape = Tape()
        feats = model.encode(tape, batch, ctx)

        flip_p = 0.0
        if self.train_bit_flips:
            flip_p = ber_theory_qpsk_awgn(effective_ebn0_db(mu, ofdm))

        dec_inputs = []
        vq_terms = []
        for s, (f, cb) in enumerate(zip(feats, model.codebooks)):
            b, h, w, c = f.data.shape
            flat = ad.reshape(tape, f, (b * h * w, c))
            q, assign = quantize_ste(tape, flat, cb, tau=loss_cfg.tau)
            term, _ = vq_loss(tape, flat, assign, Var(cb.vectors), loss_cfg)
            vq_terms.append(term)
            epoch_stats[s].append(assign)
            epoch_hist[s] += assign.batch_hist
            qgrid = ad.reshape(tape, q, (b, h, w, c))
            if flip_p > 0.0:
                # value takes the corrupted lookup, gradient stays on the
                # clean quantized path (transmission treated as transparent
                # for backprop)
                idx = flip_index_bits(assign.indices.reshape(b, h, w),
                                      model.config.index_bit_widths[s],
                                      flip_p, rng_flip)
                qgrid = ad.straight_through(tape, qgrid, cb.vectors[idx])
            dec_inputs.append(qgrid)

        out = model.decode(tape, dec_inputs, ctx)
        recon = ad.mse_loss(tape, out, batch.astype(out.data.dtype))
        total = ad.weighted_sum(tape, [recon] + vq_terms,
                                [1.0] * (1 + len(vq_terms)))
        opt.zero_grad()
        tape.backward(total)
        clip_global_norm(model.params(), self.clip_norm)
        opt.step()
        return total.data.item()

    # -- inference ---------------------------------------------------------

    def transform(self, X, snr_db=None) -> np.ndarray:
        """Images -> integer index payload matrix (n, M1+M2+M3)."""
        self._check_fitted()
        X = check_images(X, self.image_size)
        ctx = SnrContext(check_snr_db(
            self.eval_snr_db if snr_db is None else snr_db))
        tape = Tape()
        feats = self.model_.encode(tape, X, ctx)
        bundles, _, _ = self.model_.quantize(tape, feats, tau=self.tau)
        return np.stack([
            np.concatenate([g.reshape(-1) for g in bu.grids]) for bu in bundles
        ]).astype(np.int32)

    def encode_bundles(self, X, snr_db=None) -> list[IndexBundle]:
        """Images -> per-image IndexBundle payloads (the modem's unit)."""
        self._check_fitted()
        X = check_images(X, self.image_size)
        ctx = SnrContext(check_snr_db(
            self.eval_snr_db if snr_db is None else snr_db))
        tape = Tape()
        feats = self.model_.encode(tape, X, ctx)
        bundles, _, _ = self.model_.quantize(tape, feats, tau=self.tau)
        return bundles

    def _matrix_to_bundles(self, I: np.ndarray) -> list[IndexBundle]:
        cfg = self.config_
        I = check_index_matrix(I, sum(cfg.stage_tokens))
        bundles = []
        chash = self.config_hash_
        for row in I:
            grids = []
            off = 0
            for (h, w) in cfg.stage_shapes:
                grids.append(row[off:off + h * w].reshape(h, w))
                off += h * w
            bundles.append(IndexBundle(i1=grids[0], i2=grids[1],
                                       i3=grids[2], config_hash=chash))
        return bundles

    def inverse_transform(self, I, snr_db=None) -> np.ndarray:
        """Index payload matrix -> reconstructed images (n, H, W, 3)."""
        self._check_fitted()
        bundles = self._matrix_to_bundles(I)
        ctx = SnrContext(check_snr_db(
            self.eval_snr_db if snr_db is None else snr_db))
        return self.model_.reconstruct_from_bundles(bundles, ctx)

    def decode_bundles(self, bundles: list[IndexBundle],
                       snr_db=None) -> np.ndarray:
        self._check_fitted()
        ctx = SnrContext(check_snr_db(
            self.eval_snr_db if snr_db is None else snr_db))
        return self.model_.reconstruct_from_bundles(bundles, ctx)

    def score(self, X, y=None) -> float:
        """Mean loopback PSNR (identity channel) over X, in dB."""
        X = check_images(X, self.image_size)
        recon = self.inverse_transform(self.transform(X))
        return float(np.mean([psnr(a, b) for a, b in zip(X, recon)]))

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        """Write weights + codebooks + architecture metadata (binary store)."""
        self._check_fitted()
        cfg = self.config_
        meta = np.array(
            [cfg.height, cfg.width, cfg.channels, *cfg.enc_widths,
             *cfg.dec_widths, *cfg.codebook_sizes, cfg.block_depth,
             cfg.snr_embed_dim], dtype=np.float32)
        arrays = {
            "meta.arch": meta,
            "meta.config_hash": pack_u64(self.config_hash_),
            "meta.vq": np.array([self.gamma, self.eps, self.tau],
                                dtype=np.float32),
            "meta.eval_snr_db": np.array([self.eval_snr_db],
                                         dtype=np.float32),
        }
        arrays.update(self.model_.state_arrays())
        save_arrays(path, arrays)

    @classmethod
    def load(cls, path) -> "VqImageCodec":
        """Rebuild a fitted codec from a checkpoint file."""
        arrays = load_arrays(path)
        try:
            meta = arrays["meta.arch"].astype(int)
            gamma, eps, tau = (float(v) for v in arrays["meta.vq"])
            eval_snr = float(arrays["meta.eval_snr_db"][0])
            stored_hash = unpack_u64(arrays["meta.config_hash"])
        except KeyError as exc:
            raise ValueError(f"{path}: missing metadata entry {exc}") from exc
        est = cls(image_size=int(meta[0]),
                  enc_widths=tuple(meta[3:6]),
                  dec_widths=tuple(meta[6:9]),
                  codebook_sizes=tuple(meta[9:12]),
                  block_depth=int(meta[12]),
                  snr_embed_dim=int(meta[13]),
                  gamma=gamma, eps=eps, tau=tau, eval_snr_db=eval_snr)
        config = est._codec_config()
        if config.config_hash() != stored_hash:
            raise ValueError(f"{path}: config hash mismatch (corrupt or "
                             "incompatible checkpoint)")
        model = CodecModel(config, seed=0)
        model.load_state_arrays(arrays, gamma=gamma, eps=eps)
        est.config_ = config
        est.model_ = model
        est.history_ = []
        est.config_hash_ = stored_hash
        return est
