"""Quantization, probability modeling, and latent coding.

Each main latent (motion, residual) is modeled by a mean-scale Gaussian whose
parameters come from a decoded hyper latent fused with a temporal context
derived from decoder-side features. Hyper latents use a learned per-channel
factorized Gaussian prior. Scales are floored at SCALE_MIN and bin
probabilities at PROB_FLOOR so the range coder's 16-bit tables stay sane.
"""

from __future__ import annotations

import numpy as np
from scipy import special as sp_special

from ..errors import CoderError, NumericsError
from ..nn import Tensor, ops
from ..nn.layers import Conv2d
from . import rangecoder

SCALE_MIN = 0.11
PROB_FLOOR = 2.0 ** -16
LN2 = float(np.log(2.0))
MAX_SUPPORT = 4096


# ---------------------------------------------------------------------------
# quantization


def quantize(x: Tensor, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Round-to-integer in eval (ties away from zero); additive U(-.5,.5) in train."""
    if mode == "eval":
        q = np.copysign(np.floor(np.abs(x.data) + 0.5), x.data)
        return Tensor(q.astype(x.data.dtype))
    if mode == "train":
        if rng is None:
            raise CoderError("train-mode quantization needs an RNG")
        noise = rng.uniform(-0.5, 0.5, size=x.data.shape).astype(x.data.dtype)
        return ops.add(x, Tensor(noise))
    raise CoderError(f"unknown quantization mode {mode!r}")


# ---------------------------------------------------------------------------
# differentiable bit estimates


def gaussian_bits_map(q: Tensor, mean: Tensor, scale: Tensor) -> Tensor:
    """Per-element -log2 P(q) under N(mean, scale) integrated over [q-.5, q+.5]."""
    centred = ops.sub(q, mean)
    upper = ops.normal_cdf(ops.div(ops.shift(centred, 0.5), scale))
    lower = ops.normal_cdf(ops.div(ops.shift(centred, -0.5), scale))
    p = ops.clamp_min(ops.sub(upper, lower), PROB_FLOOR)
    return ops.scale(ops.neg(ops.tlog(p)), 1.0 / LN2)


def estimate_bits(q: Tensor, mean: Tensor, scale: Tensor) -> Tensor:
    """Total bits for a latent tensor; differentiable in train mode."""
    return ops.tsum(gaussian_bits_map(q, mean, scale))


# ---------------------------------------------------------------------------
# probability model modules


class FactorizedPrior:
    """Learned per-channel Gaussian over a hyper latent."""

    def __init__(self, store, name: str, channels: int):
        self.mean = store.register(f"{name}.mu", np.zeros(channels))
        self.raw_scale = store.register(f"{name}.rs", np.full(channels, 1.0))
        self.channels = channels

    def params(self, h: int, w: int):
        mean = ops.expand_channel(self.mean, h, w)
        scale = ops.shift(ops.softplus(ops.expand_channel(self.raw_scale, h, w)), SCALE_MIN)
        return mean, scale

    def bits(self, q: Tensor) -> Tensor:
        _, h, w = q.data.shape
        mean, scale = self.params(h, w)
        return estimate_bits(q, mean, scale)


class HyperCodec:
    """Hyper encoder/decoder pair around one main latent."""

    def __init__(self, store, name: str, c_latent: int, c_hyper: int, rng):
        self.e1 = Conv2d(store, f"{name}.e1", c_latent, c_hyper, stride=2, rng=rng)
        self.e2 = Conv2d(store, f"{name}.e2", c_hyper, c_hyper, stride=2, rng=rng)
        self.d1 = Conv2d(store, f"{name}.d1", c_hyper, c_hyper, rng=rng)
        self.d2 = Conv2d(store, f"{name}.d2", c_hyper, c_hyper, rng=rng)
        self.prior = FactorizedPrior(store, f"{name}.prior", c_hyper)

    def encode(self, latent: Tensor) -> Tensor:
        return self.e2(ops.leaky_relu(self.e1(latent)))

    def decode(self, hyper_hat: Tensor) -> Tensor:
        x = ops.upsample2(ops.leaky_relu(self.d1(hyper_hat)))
        return ops.upsample2(ops.leaky_relu(self.d2(x)))


class EntropyParams:
    """Fuses hyper decode and temporal context into per-element (mean, scale)."""

    def __init__(self, store, name: str, c_latent: int, c_hyper: int, c_ctx_in: int,
                 c_ctx: int, rng):
        self.ctx1 = Conv2d(store, f"{name}.c1", c_ctx_in, c_ctx, stride=2, rng=rng)
        self.ctx2 = Conv2d(store, f"{name}.c2", c_ctx, c_ctx, stride=2, rng=rng)
        self.f1 = Conv2d(store, f"{name}.f1", c_hyper + c_ctx, 2 * c_latent, ksize=1, rng=rng)
        self.f2 = Conv2d(store, f"{name}.f2", 2 * c_latent, 2 * c_latent, ksize=1, rng=rng)
        self.c_latent = c_latent

    def __call__(self, hyper_decoded: Tensor, context_feature: Tensor):
        ctx = self.ctx2(ops.leaky_relu(self.ctx1(context_feature)))
        fused = ops.leaky_relu(self.f1(ops.concat([hyper_decoded, ctx])))
        raw = self.f2(fused)
        mean = ops.slice_channels(raw, 0, self.c_latent)
        scale = ops.shift(ops.softplus(
            ops.slice_channels(raw, self.c_latent, 2 * self.c_latent)), SCALE_MIN)
        return mean, scale


# ---------------------------------------------------------------------------
# actual coding of integer latents (numpy side, shared encoder/decoder path)


def _write_varint(value: int) -> bytes:
    out = bytearray()
    v = value
    while True:
        b = v & 0x7F
        v >>= 7
        out.append(b | (0x80 if v else 0))
        if not v:
            return bytes(out)


def _read_varint(buf: bytes, pos: int):
    value = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise CoderError("substream truncated inside its support header")
        b = buf[pos]
        pos += 1
        value |= (b & 0x7F) << shift
        if not b & 0x80:
            return value, pos
        shift += 7
        if shift > 63:
            raise CoderError("corrupt varint in support header")


def _gaussian_cum_tables(mean: np.ndarray, scale: np.ndarray, smin: int, smax: int):
    """Quantized cumulative frequency rows for every element, support [smin, smax]."""
    width = smax - smin + 1
    if width > MAX_SUPPORT:
        raise CoderError(f"latent support width {width} exceeds {MAX_SUPPORT}")
    mu = mean.reshape(-1, 1)
    sd = scale.reshape(-1, 1)
    edges = np.arange(smin, smax + 2, dtype=np.float64) - 0.5
    cdf = sp_special.ndtr((edges[None, :] - mu) / sd)
    probs = np.diff(cdf, axis=1)
    # fold tail mass into the endpoint bins so rows sum to one
    probs[:, 0] += cdf[:, 0]
    probs[:, -1] += 1.0 - cdf[:, -1]
    freqs = rangecoder.quantize_pmf(probs)
    return rangecoder.cumulative_rows(freqs)


SUPPORT_SIGMAS = 6.0


def _model_support(mean: np.ndarray, scale: np.ndarray):
    """Support both sides derive from the probability model alone."""
    lo = int(np.floor((mean - SUPPORT_SIGMAS * scale).min()))
    hi = int(np.ceil((mean + SUPPORT_SIGMAS * scale).max()))
    return lo, hi


def encode_gaussian_latent(q: np.ndarray, mean: np.ndarray, scale: np.ndarray) -> bytes:
    """Substream layout: varint lo-extension | varint hi-extension | coded symbols.

    The support covers the model's 6-sigma range, so the discrete tables track
    the continuous bit estimate from both sides; the header only carries how
    far observed outliers extend it (two zero bytes in the common case),
    keeping constant overhead inside the 64-bit per-substream allowance.
    """
    if not np.all(np.isfinite(q)):
        raise NumericsError("latent holds non-finite values")
    qi = q.astype(np.int64)
    if not np.array_equal(qi, q):
        raise CoderError("latent must be integral before coding")
    model_lo, model_hi = _model_support(mean, scale)
    smin = min(int(qi.min()), model_lo)
    smax = max(int(qi.max()), model_hi)
    tables = _gaussian_cum_tables(mean, scale, smin, smax)
    body = rangecoder.encode_with_tables((qi.reshape(-1) - smin).tolist(), tables)
    return _write_varint(model_lo - smin) + _write_varint(smax - model_hi) + body


def decode_gaussian_latent(stream: bytes, mean: np.ndarray, scale: np.ndarray,
                           shape, dtype=np.float32) -> np.ndarray:
    lo_ext, pos = _read_varint(stream, 0)
    hi_ext, pos = _read_varint(stream, pos)
    model_lo, model_hi = _model_support(mean, scale)
    smin = model_lo - lo_ext
    smax = model_hi + hi_ext
    tables = _gaussian_cum_tables(mean, scale, smin, smax)
    count = int(np.prod(shape))
    symbols = rangecoder.decode_with_tables(stream[pos:], tables, count)
    return (np.asarray(symbols, dtype=np.int64) + smin).reshape(shape).astype(dtype)


def measured_vs_estimated_ok(coded_bytes: int, estimated_bits: float) -> bool:
    """Coder near-optimality bound: 0.1% of the estimate plus 64 bits."""
    return abs(coded_bytes * 8.0 - estimated_bits) <= 0.001 * estimated_bits + 64.0
