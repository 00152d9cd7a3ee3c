"""SNR adaptation block tests."""

import numpy as np
import pytest

from vqdisc import autodiff as ad
from vqdisc.autodiff import Tape, Var
from vqdisc.modnet import SnrContext, SnrModNet, sample_training_snr

from helpers import numeric_grad, rel_error


def make_block(channels=4, d_snr=3, seed=0):
    return SnrModNet(channels, d_snr, np.random.default_rng(seed), "modnet.t.1")


class TestForward:
    def test_zero_factor_weights_halve_input(self):
        block = make_block()
        block.factor_w.data[:] = 0.0
        block.enhance_w.data[:] = 0.0
        x = np.random.default_rng(1).standard_normal((2, 3, 3, 4)).astype(np.float32)
        out = block(Tape(), Var(x), SnrContext(10.0))
        # sigmoid(0) = 0.5 scaling, relu(0) enhancer adds nothing
        assert np.allclose(out.data, x / 2.0, atol=1e-6)

    def test_zero_enhancer_is_pure_scaling(self):
        block = make_block()
        block.enhance_w.data[:] = 0.0
        x = np.random.default_rng(2).standard_normal((1, 2, 2, 4)).astype(np.float32)
        t = Tape()
        out = block(t, Var(x), SnrContext(5.0))
        # out = x * f for some per-channel f in (0,1)
        ratio = out.data / x
        f = ratio.reshape(-1, 4)
        assert np.allclose(f, f[0], atol=1e-5)
        assert np.all(f[0] > 0) and np.all(f[0] < 1)

    def test_shape_preserved(self):
        block = make_block(channels=6)
        for shape in [(1, 2, 2, 6), (3, 4, 8, 6)]:
            x = np.zeros(shape, dtype=np.float32)
            out = block(Tape(), Var(x), SnrContext(0.0))
            assert out.data.shape == shape

    def test_channel_mismatch_rejected(self):
        block = make_block(channels=4)
        with pytest.raises(ValueError):
            block(Tape(), Var(np.zeros((1, 2, 2, 5))), SnrContext(0.0))

    def test_attenuation_only_before_residual(self):
        # with the enhancer zeroed, |out| <= |x| elementwise
        block = make_block(seed=3)
        block.enhance_w.data[:] = 0.0
        block.enhance_b.data[:] = 0.0
        x = np.random.default_rng(4).standard_normal((2, 4, 4, 4)).astype(np.float32)
        out = block(Tape(), Var(x), SnrContext(12.0))
        assert np.all(np.abs(out.data) <= np.abs(x) + 1e-7)


class TestGradients:
    def test_input_and_parameter_gradients(self):
        rng = np.random.default_rng(5)
        with ad.using_dtype(np.float64):
            block = make_block(seed=6)
            x = Var(rng.standard_normal((2, 3, 3, 4)))
            ctx = SnrContext(7.0)
            proj = rng.standard_normal((2, 3, 3, 4))

            def forward():
                out = block(Tape(), x, ctx)
                return np.sum(out.data * proj)

            tape = Tape()
            out = block(tape, x, ctx)
            loss = Var(np.sum(out.data * proj))
            tape.record(lambda: out.accum(proj * loss.grad))
            tape.backward(loss)

            for var, label in [(x, "x")] + [(p, p.name) for p in block.params()]:
                num = numeric_grad(forward, var.data, 1e-6)
                ana = var.grad if var.grad is not None else np.zeros_like(var.data)
                err = rel_error(ana, num)
                assert err < 1e-5, f"{label}: rel err {err:.2e}"


class TestSnrContext:
    def test_normalization(self):
        assert SnrContext(15.0).normalized == pytest.approx(1.0)
        assert SnrContext(0.0).normalized == pytest.approx(0.0)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            SnrContext(float("nan"))


class TestSampleTrainingSnr:
    def test_support_and_mean(self):
        rng = np.random.default_rng(7)
        draws = np.array([sample_training_snr(rng) for _ in range(100_000)])
        assert draws.min() >= 0.0 and draws.max() <= 15.0
        assert draws.mean() == pytest.approx(7.5, abs=0.05)

    def test_reproducible_under_seed(self):
        a = [sample_training_snr(np.random.default_rng(8)) for _ in range(5)]
        b = [sample_training_snr(np.random.default_rng(8)) for _ in range(5)]
        assert a == b
