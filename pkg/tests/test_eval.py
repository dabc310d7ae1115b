"""Evaluation metrics: bpp, entropy per pixel, BD-rate closed forms."""

import numpy as np
import pytest

from vfcodec.errors import ShapeError, StateError
from vfcodec.codec import bitstream as bs
from vfcodec.evaluate import (RateTaskCurve, bd_rate, bpp, curve_csv,
                              entropy_per_pixel, spearman)

rng = np.random.default_rng(81)


def stream_with_payload(n_bytes: int, width: int, height: int):
    rec = bs.FrameRecord(bs.FRAME_I, (bytes(n_bytes),))
    return bs.serialize([rec], width, height, 0)


class TestBpp:
    def test_empty_payload(self):
        blob = stream_with_payload(0, 64, 64)
        assert bpp(blob, 64, 64) == 0.0

    def test_exact_one_bpp(self):
        blob = stream_with_payload(1152, 96, 96)
        assert bpp(blob, 96, 96) == 1.0

    def test_hand_arithmetic(self):
        blob = stream_with_payload(1000, 1280, 720)
        assert bpp(blob, 1280, 720) == pytest.approx(8000 / 921600, rel=1e-12)

    def test_zero_dims_rejected(self):
        with pytest.raises(ShapeError):
            bpp(stream_with_payload(10, 64, 64), 0, 64)

    def test_multi_frame_normalization(self):
        recs = [bs.FrameRecord(bs.FRAME_I, (bytes(100),)),
                bs.FrameRecord(bs.FRAME_P, (bytes(25),) * 4)]
        blob = bs.serialize(recs, 64, 64, 0)
        assert bpp(blob, 64, 64) == (8 * 200) / (64 * 64 * 2)


class TestEntropyPerPixel:
    def test_constant_tensor(self):
        assert entropy_per_pixel(np.full((3, 8, 8), 2.5)) == 0.0

    def test_half_zeros_half_ones(self):
        x = np.zeros((1, 4, 4))
        x[0, :2, :] = 1.0
        assert entropy_per_pixel(x) == pytest.approx(1.0, rel=1e-9)

    def test_64_channels_four_values(self):
        # four equiprobable values in every element: 2 bits x 64 channels
        values = np.array([0.0, 1.0, 2.0, 3.0])
        x = np.tile(values[None, :, None], (64, 1, 4)).reshape(64, 4, 4)
        assert entropy_per_pixel(x) == pytest.approx(128.0, rel=1e-9)

    def test_brute_force_histogram_oracle(self):
        x = rng.normal(size=(5, 6, 6))
        lo, hi = x.min(), x.max()
        bins = np.minimum(((x - lo) / (hi - lo) * 256).astype(int), 255)
        probs = {}
        for b in bins.reshape(-1):
            probs[b] = probs.get(b, 0) + 1
        n = bins.size
        info = -sum(c * np.log2(c / n) for c in probs.values())
        assert entropy_per_pixel(x) == pytest.approx(info / 36, rel=1e-9)

    def test_explicit_pixel_denominator(self):
        x = np.zeros((1, 4, 4))
        x[0, :2, :] = 1.0
        assert entropy_per_pixel(x, pixels=(8, 8)) == pytest.approx(0.25, rel=1e-9)

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            entropy_per_pixel(np.zeros((0, 4, 4)))


class TestBdRate:
    POINTS = [(0.1, 0.50), (0.2, 0.60), (0.4, 0.68), (0.8, 0.74)]

    def test_identity_is_exactly_zero(self):
        assert bd_rate(self.POINTS, list(self.POINTS)) == 0.0

    def test_doubled_rate_is_plus_100(self):
        doubled = [(2 * r, s) for r, s in self.POINTS]
        assert bd_rate(self.POINTS, doubled) == pytest.approx(100.0, abs=1e-6)

    def test_swapped_arguments_minus_50(self):
        doubled = [(2 * r, s) for r, s in self.POINTS]
        assert bd_rate(doubled, self.POINTS) == pytest.approx(-50.0, abs=1e-6)

    def test_invariant_to_point_order(self):
        shuffled = [self.POINTS[2], self.POINTS[0], self.POINTS[3], self.POINTS[1]]
        doubled = [(2 * r, s) for r, s in shuffled]
        assert bd_rate(self.POINTS, doubled) == pytest.approx(100.0, abs=1e-6)

    def test_no_overlap_error(self):
        low = [(0.1, 0.1), (0.2, 0.2), (0.3, 0.25), (0.4, 0.3)]
        high = [(0.1, 0.5), (0.2, 0.6), (0.3, 0.7), (0.4, 0.8)]
        with pytest.raises(StateError):
            bd_rate(low, high)

    def test_nonpositive_rate_rejected(self):
        with pytest.raises(StateError):
            bd_rate([(0.0, 0.5), (0.2, 0.6)], self.POINTS)

    def test_curve_type_accepted(self):
        anchor = RateTaskCurve("a", self.POINTS)
        test = RateTaskCurve("b", [(2 * r, s) for r, s in self.POINTS])
        assert bd_rate(anchor, test) == pytest.approx(100.0, abs=1e-6)


class TestSpearman:
    def test_perfect_monotone(self):
        assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0
        assert spearman([1, 2, 3, 4], [40, 30, 20, 10]) == -1.0

    def test_partial(self):
        rho = spearman([1, 2, 3, 4], [10, 30, 20, 40])
        assert 0.0 < rho < 1.0

    def test_matches_rank_formula(self):
        xs = rng.normal(size=10)
        ys = rng.normal(size=10)
        rho = spearman(xs, ys)
        rx = np.argsort(np.argsort(xs)) + 1.0
        ry = np.argsort(np.argsort(ys)) + 1.0
        d = rx - ry
        want = 1 - 6 * np.sum(d * d) / (10 * (100 - 1))
        assert rho == pytest.approx(want, rel=1e-9)


class TestCurveContainers:
    def test_curve_sorts_and_validates(self):
        curve = RateTaskCurve("m", [(0.4, 0.7), (0.1, 0.5)])
        assert curve.rates() == [0.1, 0.4]
        with pytest.raises(StateError):
            RateTaskCurve("m", [(0.0, 0.5), (1.0, 0.6)])

    def test_csv_deterministic(self):
        curve = RateTaskCurve("m", [(0.4, 0.7), (0.1, 0.5)])
        assert curve_csv(curve) == curve_csv(RateTaskCurve("m", [(0.1, 0.5), (0.4, 0.7)]))
        assert curve_csv(curve).splitlines()[0] == "model_id,bpp,score"
