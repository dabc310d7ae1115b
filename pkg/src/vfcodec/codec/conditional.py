"""Perception-guided conditional coding and the channel squeeze.

The conditional encoder concatenates the current and compensated features and
runs four conv stages with two stride-2 steps; multi-scale perception
conditions are projected to a small width and concatenated at the stages
whose spatial size matches (feature-relative scales 1, 1/2, 1/4). The
decoder mirrors the structure, also conditioned on the compensated feature,
and emits a zero-initialized correction added on top of it, so at
initialization the reconstruction equals the compensated feature exactly.

The decoder's interface never receives the original feature or the encoder-
side conditions.
"""

from __future__ import annotations

from ..errors import ShapeError
from ..nn import Tensor, ops
from ..nn.layers import Conv2d

CONDITION_SCALES = (0, 1, 2)       # pyramid levels injected (of 5)


class ChannelSqueeze:
    """1x1 reduce/restore pair between wide and narrow widths (4:1)."""

    def __init__(self, store, cfg, rng):
        self.c_wide = cfg.c_feat
        self.c_narrow = cfg.c_narrow
        self._reduce = Conv2d(store, "squeeze.red", self.c_wide, self.c_narrow, ksize=1, rng=rng)
        self._restore = Conv2d(store, "squeeze.res", self.c_narrow, self.c_wide, ksize=1, rng=rng)

    def reduce(self, wide: Tensor) -> Tensor:
        if wide.data.shape[0] != self.c_wide:
            raise ShapeError(f"expected {self.c_wide} wide channels, got {wide.data.shape[0]}")
        return self._reduce(wide)

    def restore(self, narrow: Tensor) -> Tensor:
        if narrow.data.shape[0] != self.c_narrow:
            raise ShapeError(f"expected {self.c_narrow} narrow channels, got {narrow.data.shape[0]}")
        return self._restore(narrow)


class ConditionalEncoder:
    def __init__(self, store, cfg, rng, with_conditions: bool = True):
        w = cfg.codec_width
        self.with_conditions = with_conditions
        self.c_inj = max(4, w // 4) if with_conditions else 0
        if with_conditions:
            self.proj = [Conv2d(store, f"cond.enc.p{k}", cfg.c_p, self.c_inj, ksize=1, rng=rng)
                         for k in CONDITION_SCALES]
        self.s1 = Conv2d(store, "cond.enc.s1", 2 * cfg.c_narrow + self.c_inj, w, rng=rng)
        self.s2 = Conv2d(store, "cond.enc.s2", w, w, stride=2, rng=rng)
        self.s3 = Conv2d(store, "cond.enc.s3", w + self.c_inj, w, stride=2, rng=rng)
        self.s4 = Conv2d(store, "cond.enc.s4", w + self.c_inj, cfg.residual_latent, rng=rng)

    def _inject(self, x: Tensor, conditions, level: int) -> Tensor:
        if not self.with_conditions:
            return x
        cond = conditions[CONDITION_SCALES[level]]
        if cond.data.shape[1:] != x.data.shape[1:]:
            raise ShapeError(
                f"condition scale mismatch at stage {level}: {cond.data.shape} vs {x.data.shape}")
        return ops.concat([x, self.proj[level](cond)])

    def __call__(self, f_t: Tensor, f_tilde: Tensor, conditions=None,
                 want_stages: bool = False):
        if f_t.data.shape != f_tilde.data.shape:
            raise ShapeError(f"shapes differ: {f_t.data.shape} vs {f_tilde.data.shape}")
        if self.with_conditions and (conditions is None or len(conditions) != 5):
            raise ShapeError("conditional encoder needs the 5-level perception condition")
        x0 = ops.concat([f_t, f_tilde])
        x1 = ops.leaky_relu(self.s1(self._inject(x0, conditions, 0)))   # scale 1, p2
        x2 = ops.leaky_relu(self.s2(x1))                                # scale 1/2
        x3 = ops.leaky_relu(self.s3(self._inject(x2, conditions, 1)))   # scale 1/4, p3 at 1/2
        latent = self.s4(self._inject(x3, conditions, 2))               # p4 at 1/4
        if want_stages:
            return latent, [x0, x1, x2, x3, latent]
        return latent


class ConditionalDecoder:
    def __init__(self, store, cfg, rng, with_conditions: bool = True):
        w = cfg.codec_width
        self.with_conditions = with_conditions
        self.c_inj = max(4, w // 4) if with_conditions else 0
        if with_conditions:
            self.proj = [Conv2d(store, f"cond.dec.p{k}", cfg.c_p, self.c_inj, ksize=1, rng=rng)
                         for k in CONDITION_SCALES]
        self.d1 = Conv2d(store, "cond.dec.d1", cfg.residual_latent + self.c_inj, w, rng=rng)
        self.d2 = Conv2d(store, "cond.dec.d2", w + self.c_inj, w, rng=rng)
        self.d3 = Conv2d(store, "cond.dec.d3", w + cfg.c_narrow + self.c_inj, w, rng=rng)
        self.d4 = Conv2d(store, "cond.dec.d4", w, cfg.c_narrow, rng=rng, init="zeros")

    def _inject(self, x: Tensor, conditions, level: int) -> Tensor:
        if not self.with_conditions:
            return x
        cond = conditions[CONDITION_SCALES[level]]
        if cond.data.shape[1:] != x.data.shape[1:]:
            raise ShapeError(
                f"condition scale mismatch at stage {level}: {cond.data.shape} vs {x.data.shape}")
        return ops.concat([x, self.proj[level](cond)])

    def __call__(self, y_hat: Tensor, f_tilde: Tensor, conditions=None) -> Tensor:
        if self.with_conditions and (conditions is None or len(conditions) != 5):
            raise ShapeError("conditional decoder needs the 5-level perception condition")
        x = ops.leaky_relu(self.d1(self._inject(y_hat, conditions, 2)))
        x = ops.upsample2(x)
        x = ops.leaky_relu(self.d2(self._inject(x, conditions, 1)))
        x = ops.upsample2(x)
        x = ops.leaky_relu(self.d3(self._inject(ops.concat([x, f_tilde]), conditions, 0)))
        correction = self.d4(x)
        return ops.add(f_tilde, correction)
