"""Entropy model: quantization, bit estimates, latent coding round trips."""

import math

import numpy as np
import pytest

from vfcodec.codec import entropy
from vfcodec.errors import CoderError
from vfcodec.nn import ParameterStore, Tensor

from helpers import check_gradients

rng = np.random.default_rng(77)


def phi(x):
    # independent normal CDF route for oracles
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


class TestQuantize:
    def test_eval_fixed_point_on_integers(self):
        x = Tensor(np.array([-3.0, 0.0, 7.0]))
        np.testing.assert_array_equal(entropy.quantize(x, "eval").data, x.data)

    def test_tie_rule_away_from_zero(self):
        x = Tensor(np.array([0.5, -0.5, 1.5, -2.5]))
        np.testing.assert_array_equal(entropy.quantize(x, "eval").data,
                                      [1.0, -1.0, 2.0, -3.0])

    def test_quantization_error_bound(self):
        x = Tensor(rng.normal(size=1000) * 10)
        q = entropy.quantize(x, "eval")
        assert np.abs(q.data - x.data).max() <= 0.5

    def test_train_noise_statistics(self):
        x = Tensor(np.zeros(100_000))
        q = entropy.quantize(x, "train", np.random.default_rng(0))
        noise = q.data - x.data
        assert abs(np.abs(noise).mean() - 0.25) <= 0.01
        assert np.abs(noise).max() <= 0.5

    def test_train_mode_keeps_gradient(self):
        x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        q = entropy.quantize(x, "train", np.random.default_rng(1))
        from vfcodec.nn import ops
        ops.tsum(q).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


class TestEstimateBits:
    def test_half_probability_is_one_bit(self):
        # scale chosen so the centred unit bin has probability 1/2
        target = 0.5
        lo, hi = 0.1, 10.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            p = phi(0.5 / mid) - phi(-0.5 / mid)
            if p > target:
                lo = mid
            else:
                hi = mid
        sigma = 0.5 * (lo + hi)
        bits = entropy.estimate_bits(Tensor(np.zeros((1, 1, 1))),
                                     Tensor(np.zeros((1, 1, 1))),
                                     Tensor(np.full((1, 1, 1), sigma)))
        assert bits.item() == pytest.approx(1.0, abs=1e-4)

    def test_unit_gaussian_zero_bin(self):
        p = phi(0.5) - phi(-0.5)
        want = -math.log2(p)
        bits = entropy.estimate_bits(Tensor(np.zeros((1, 1, 1))),
                                     Tensor(np.zeros((1, 1, 1))),
                                     Tensor(np.ones((1, 1, 1))))
        assert p == pytest.approx(0.3829, abs=1e-4)
        assert bits.item() == pytest.approx(want, rel=1e-9)

    def test_tensor_total_matches_elementwise_oracle(self):
        q = np.round(rng.normal(size=(4, 3, 3)) * 3)
        mu = rng.normal(size=(4, 3, 3))
        sc = np.abs(rng.normal(size=(4, 3, 3))) + 0.2
        total = entropy.estimate_bits(Tensor(q), Tensor(mu), Tensor(sc)).item()
        oracle = 0.0
        for qi, mi, si in zip(q.reshape(-1), mu.reshape(-1), sc.reshape(-1)):
            p = phi((qi - mi + 0.5) / si) - phi((qi - mi - 0.5) / si)
            oracle += -math.log2(max(p, 2.0 ** -16))
        assert total == pytest.approx(oracle, rel=1e-9)

    def test_probability_floor(self):
        bits = entropy.estimate_bits(Tensor(np.full((1, 1, 1), 1000.0)),
                                     Tensor(np.zeros((1, 1, 1))),
                                     Tensor(np.full((1, 1, 1), 0.11)))
        assert bits.item() == pytest.approx(16.0, rel=1e-12)

    def test_gradients(self):
        q = rng.normal(size=(2, 2, 2))
        mu = rng.normal(size=(2, 2, 2))
        raw = rng.normal(size=(2, 2, 2))
        from vfcodec.nn import ops

        def build(qt, mt, rt):
            return entropy.estimate_bits(qt, mt, ops.shift(ops.softplus(rt), 0.11))

        check_gradients(build, [q, mu, raw])


class TestEntropyParams:
    def test_scale_floor_holds_for_wild_inputs(self):
        store = ParameterStore()
        ep = entropy.EntropyParams(store, "ep", c_latent=6, c_hyper=4, c_ctx_in=3,
                                   c_ctx=5, rng=np.random.default_rng(0))
        hyper = Tensor(rng.normal(size=(4, 2, 2)).astype(np.float32) * 50)
        ctx = Tensor(rng.normal(size=(3, 8, 8)).astype(np.float32) * 50)
        mean, scale = ep(hyper, ctx)
        assert scale.data.min() >= 0.11
        assert mean.data.shape == scale.data.shape == (6, 2, 2)

    def test_zero_context_permitted(self):
        store = ParameterStore()
        ep = entropy.EntropyParams(store, "ep", c_latent=6, c_hyper=4, c_ctx_in=3,
                                   c_ctx=5, rng=np.random.default_rng(0))
        mean, scale = ep(Tensor(np.zeros((4, 2, 2), dtype=np.float32)),
                         Tensor(np.zeros((3, 8, 8), dtype=np.float32)))
        assert np.all(np.isfinite(mean.data)) and scale.data.min() >= 0.11

    def test_deterministic_across_calls(self):
        store = ParameterStore()
        ep = entropy.EntropyParams(store, "ep", c_latent=6, c_hyper=4, c_ctx_in=3,
                                   c_ctx=5, rng=np.random.default_rng(0))
        hyper = Tensor(rng.normal(size=(4, 2, 2)).astype(np.float32))
        ctx = Tensor(rng.normal(size=(3, 8, 8)).astype(np.float32))
        m1, s1 = ep(hyper, ctx)
        m2, s2 = ep(hyper, ctx)
        assert np.array_equal(m1.data, m2.data) and np.array_equal(s1.data, s2.data)


class TestLatentCoding:
    def test_roundtrip_various_stats(self):
        for case in range(20):
            case_rng = np.random.default_rng(case)
            shape = (6, 4, 4)
            mu = case_rng.normal(size=shape) * 2
            sc = np.abs(case_rng.normal(size=shape)) + 0.11
            q = np.round(case_rng.normal(size=shape) * (case % 5 + 0.5))
            stream = entropy.encode_gaussian_latent(q, mu, sc)
            back = entropy.decode_gaussian_latent(stream, mu, sc, shape)
            np.testing.assert_array_equal(back, q.astype(np.float32))

    def test_near_optimal_length(self):
        case_rng = np.random.default_rng(9)
        shape = (16, 8, 8)
        mu = np.zeros(shape)
        sc = np.full(shape, 2.0)
        q = np.round(case_rng.normal(size=shape) * 2)
        stream = entropy.encode_gaussian_latent(q, mu, sc)
        est = entropy.estimate_bits(Tensor(q), Tensor(mu), Tensor(sc)).item()
        assert abs(len(stream) * 8 - est) <= 0.001 * est + 64

    def test_non_integral_latent_rejected(self):
        with pytest.raises(CoderError):
            entropy.encode_gaussian_latent(np.array([[[0.25]]]), np.zeros((1, 1, 1)),
                                           np.ones((1, 1, 1)))

    def test_corrupt_header_rejected(self):
        mu, sc = np.zeros((1, 1, 1)), np.ones((1, 1, 1))
        stream = entropy.encode_gaussian_latent(np.zeros((1, 1, 1)), mu, sc)
        with pytest.raises(CoderError):
            entropy.decode_gaussian_latent(b"", mu, sc, (1, 1, 1))
