"""Scheme-based inter-prediction.

Motion estimation runs a four-step sampling path (down, down, up, up with
skip fusion) over a three-scale pyramid of the concatenated current and
reference features. The compensated feature is a per-pixel convex
combination of S candidate schemes generated channel-wise from the
reference; scheme 0 starts as the identity so "no motion" is representable
at initialization.

A deformable-style offset-sampling compensator is kept as the ablation
fallback: the decoded motion field drives grouped bilinear warps instead of
scheme mixing.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from ..nn import Tensor, ops
from ..nn.layers import Conv2d, ConvBlock, DepthBlock, DepthwiseSeparableConv


class MotionEstimator:
    def __init__(self, store, name: str, c_narrow: int, c_m: int, rng):
        self.stem = ConvBlock(store, f"{name}.stem", 2 * c_narrow, c_m, rng=rng)
        self.s0 = ConvBlock(store, f"{name}.s0", c_m, c_m, rng=rng)
        self.down1 = ConvBlock(store, f"{name}.dn1", c_m, c_m, stride=2, rng=rng)
        self.down2 = ConvBlock(store, f"{name}.dn2", c_m, c_m, stride=2, rng=rng)
        self.mid = ConvBlock(store, f"{name}.mid", c_m, c_m, rng=rng)
        self.fuse1 = ConvBlock(store, f"{name}.up1", 2 * c_m, c_m, rng=rng)
        self.fuse0 = ConvBlock(store, f"{name}.up0", 2 * c_m, c_m, rng=rng)
        self.head = Conv2d(store, f"{name}.head", c_m, c_m, rng=rng)

    def __call__(self, f_t: Tensor, f_ref: Tensor) -> Tensor:
        if f_t.data.shape != f_ref.data.shape:
            raise ShapeError(f"feature shapes differ: {f_t.data.shape} vs {f_ref.data.shape}")
        s_full = self.s0(self.stem(ops.concat([f_t, f_ref])))
        s_half = self.down1(s_full)           # step 1: down
        s_quarter = self.mid(self.down2(s_half))   # step 2: down
        u_half = self.fuse1(ops.concat([ops.upsample2(s_quarter), s_half]))   # step 3: up
        u_full = self.fuse0(ops.concat([ops.upsample2(u_half), s_full]))      # step 4: up
        return self.head(u_full)


class MotionEncoder:
    def __init__(self, store, name: str, c_m: int, width: int, c_latent: int, rng):
        self.c1 = Conv2d(store, f"{name}.c1", c_m, width, stride=2, rng=rng)
        self.b1 = DepthBlock(store, f"{name}.b1", width, rng=rng)
        self.c2 = Conv2d(store, f"{name}.c2", width, c_latent, stride=2, rng=rng)
        self.b2 = DepthBlock(store, f"{name}.b2", c_latent, rng=rng)

    def __call__(self, m: Tensor) -> Tensor:
        _, h, w = m.data.shape
        if h % 4 or w % 4:
            raise ShapeError(f"motion encoder needs dims divisible by 4, got {h}x{w}")
        x = self.b1(ops.leaky_relu(self.c1(m)))
        return self.b2(self.c2(x))


class MotionDecoder:
    def __init__(self, store, name: str, c_m: int, width: int, c_latent: int, rng):
        self.b1 = DepthBlock(store, f"{name}.b1", c_latent, rng=rng)
        self.c1 = Conv2d(store, f"{name}.c1", c_latent, width, rng=rng)
        self.b2 = DepthBlock(store, f"{name}.b2", width, rng=rng)
        self.c2 = Conv2d(store, f"{name}.c2", width, c_m, rng=rng)

    def __call__(self, z_hat: Tensor) -> Tensor:
        x = ops.upsample2(ops.leaky_relu(self.c1(self.b1(z_hat))))
        return self.c2(ops.upsample2(ops.leaky_relu(self.b2(x))))


class SchemeCompensator:
    """Generate S schemes per channel and mix them with softmax weights."""

    def __init__(self, store, name: str, c_narrow: int, c_m: int, schemes: int, rng):
        self.schemes = schemes
        self.generator = DepthwiseSeparableConv(
            store, f"{name}.gen", channels=c_narrow, multiplier=schemes,
            rng=rng, identity_first=True)
        self.weight_head = Conv2d(store, f"{name}.wh", c_m, c_narrow * schemes,
                                  ksize=1, rng=rng)

    def scheme_maps(self, f_ref: Tensor) -> Tensor:
        return self.generator(f_ref)

    def weights(self, m_hat: Tensor) -> Tensor:
        return ops.softmax_groups(self.weight_head(m_hat), self.schemes)

    def __call__(self, f_ref: Tensor, m_hat: Tensor) -> Tensor:
        if f_ref.data.shape[1:] != m_hat.data.shape[1:]:
            raise ShapeError(
                f"spatial dims differ: ref {f_ref.data.shape} vs motion {m_hat.data.shape}")
        mixed = ops.mul(self.weights(m_hat), self.scheme_maps(f_ref))
        return ops.group_sum(mixed, self.schemes)


class OffsetCompensator:
    """Ablation fallback: grouped offset sampling plus a zero-init refinement."""

    def __init__(self, store, name: str, c_narrow: int, c_m: int, rng, groups: int = 4):
        self.groups = min(groups, c_narrow)
        while c_narrow % self.groups:
            self.groups -= 1
        self.offset_head = Conv2d(store, f"{name}.oh", c_m, 2 * self.groups, ksize=1, rng=rng)
        self.refine = Conv2d(store, f"{name}.rf", c_narrow, c_narrow, rng=rng, init="zeros")
        self.c_narrow = c_narrow

    def __call__(self, f_ref: Tensor, m_hat: Tensor) -> Tensor:
        if f_ref.data.shape[1:] != m_hat.data.shape[1:]:
            raise ShapeError(
                f"spatial dims differ: ref {f_ref.data.shape} vs motion {m_hat.data.shape}")
        offsets = self.offset_head(m_hat)
        span = self.c_narrow // self.groups
        warped = []
        for g in range(self.groups):
            flow = ops.slice_channels(offsets, 2 * g, 2 * g + 2)
            part = ops.slice_channels(f_ref, g * span, (g + 1) * span)
            warped.append(ops.bilinear_warp(part, flow))
        out = ops.concat(warped) if len(warped) > 1 else warped[0]
        return ops.add(out, self.refine(out))


class InterPrediction:
    """Bundles ME, motion transform coding, and a compensator."""

    def __init__(self, store, cfg, rng, use_schemes: bool = True):
        c_narrow = cfg.c_narrow
        self.estimator = MotionEstimator(store, "inter.me", c_narrow, cfg.c_m, rng)
        self.encoder = MotionEncoder(store, "inter.enc", cfg.c_m, cfg.codec_width,
                                     cfg.motion_latent, rng)
        self.decoder = MotionDecoder(store, "inter.dec", cfg.c_m, cfg.codec_width,
                                     cfg.motion_latent, rng)
        if use_schemes:
            self.compensator = SchemeCompensator(store, "inter.mc", c_narrow, cfg.c_m,
                                                 cfg.schemes, rng)
        else:
            self.compensator = OffsetCompensator(store, "inter.mc", c_narrow, cfg.c_m, rng)

    def estimate(self, f_t, f_ref):
        return self.estimator(f_t, f_ref)

    def encode(self, m):
        return self.encoder(m)

    def decode(self, z_hat):
        return self.decoder(z_hat)

    def compensate(self, f_ref, m_hat):
        return self.compensator(f_ref, m_hat)


def force_one_hot_scheme(compensator: SchemeCompensator, m_hat: Tensor,
                         scheme_index: int = 0) -> np.ndarray:
    """Weights collapsed onto one scheme (diagnostic/testing aid)."""
    w = compensator.weights(m_hat).data
    out = np.zeros_like(w)
    s = compensator.schemes
    for c in range(w.shape[0] // s):
        out[c * s + scheme_index] = 1.0
    return out
