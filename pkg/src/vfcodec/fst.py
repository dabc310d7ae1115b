"""Feature space transform: three branches plus an aligning head.

Branches over the reconstructed wide feature:
  * up-then-down: upsamples x4 to a coarse pixel reconstruction (kept as a
    side output), then strides back down to feature scale;
  * bottleneck-resblock: two bottleneck residual blocks at the original shape;
  * down-then-up: global context via two stride-2 stages and x4 upsampling.

Branch outputs are projected to a common width and summed; the aligning head
is a 1x1 projection plus a zero-initialized 3x3 refinement, so at
initialization the output equals the plain projection of the branch sum.
Branch removals (the ablation variants) drop whole branches structurally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .errors import ShapeError, StateError
from .nn import ParameterStore, Tensor, ops, tensorio
from .nn.layers import Bottleneck, Conv2d
from .seeding import derive_seed

FST_VARIANTS = ("full", "no-up-down", "no-down-up", "bottleneck-only")


@dataclass
class FstOutput:
    feature: Tensor                   # (c_task, h, w)
    pixels: Tensor | None             # (3, 4h, 4w) when the up-then-down branch exists
    branch_maps: dict = field(default_factory=dict)


class FeatureSpaceTransform:
    def __init__(self, cfg: ExperimentConfig, task_id: str = "seg",
                 variant: str = "full", seed: int = 0):
        if variant not in FST_VARIANTS:
            raise StateError(f"unknown FST variant {variant!r}")
        self.cfg = cfg
        self.task_id = task_id
        self.variant = variant
        self.seed = seed
        self.use_up_down = variant in ("full", "no-down-up")
        self.use_down_up = variant in ("full", "no-up-down")
        self.store = ParameterStore()
        rng = np.random.default_rng(derive_seed(seed, "fst-init", task_id, variant))
        w = cfg.fst_width
        c_in = cfg.c_feat
        name = f"fst.{task_id}"

        if self.use_up_down:
            self.u1 = Conv2d(self.store, f"{name}.ud.u1", c_in, w, rng=rng)
            self.u2 = Conv2d(self.store, f"{name}.ud.u2", w, w, rng=rng)
            self.pixel_head = Conv2d(self.store, f"{name}.ud.px", w, 3, rng=rng)
            self.dn1 = Conv2d(self.store, f"{name}.ud.d1", 3, w, stride=2, rng=rng)
            self.dn2 = Conv2d(self.store, f"{name}.ud.d2", w, w, stride=2, rng=rng)
            self.proj_ud = Conv2d(self.store, f"{name}.ud.pj", w, w, ksize=1, rng=rng)

        self.bn1 = Bottleneck(self.store, f"{name}.bn.1", c_in, rng=rng)
        self.bn2 = Bottleneck(self.store, f"{name}.bn.2", c_in, rng=rng)
        self.proj_bn = Conv2d(self.store, f"{name}.bn.pj", c_in, w, ksize=1, rng=rng)

        if self.use_down_up:
            self.g1 = Conv2d(self.store, f"{name}.du.d1", c_in, w, stride=2, rng=rng)
            self.g2 = Conv2d(self.store, f"{name}.du.d2", w, w, stride=2, rng=rng)
            self.g3 = Conv2d(self.store, f"{name}.du.m", w, w, rng=rng)
            self.gu1 = Conv2d(self.store, f"{name}.du.u1", w, w, rng=rng)
            self.gu2 = Conv2d(self.store, f"{name}.du.u2", w, w, rng=rng)
            self.proj_du = Conv2d(self.store, f"{name}.du.pj", w, w, ksize=1, rng=rng)

        self.align_proj = Conv2d(self.store, f"{name}.al.p", w, cfg.c_task, ksize=1, rng=rng)
        self.align_refine = Conv2d(self.store, f"{name}.al.r", w, cfg.c_task, rng=rng,
                                   init="zeros")

    def __call__(self, f_hat_wide: Tensor) -> FstOutput:
        if f_hat_wide.data.shape[0] != self.cfg.c_feat:
            raise ShapeError(
                f"transform expects {self.cfg.c_feat} wide channels, got {f_hat_wide.data.shape[0]}")
        branch_maps = {}
        fused = None
        pixels = None

        if self.use_up_down:
            x = ops.leaky_relu(self.u1(ops.upsample2(f_hat_wide)))
            x = ops.leaky_relu(self.u2(ops.upsample2(x)))
            pixels = self.pixel_head(x)
            b = ops.leaky_relu(self.dn1(pixels))
            b = self.dn2(b)
            branch_maps["up_down"] = b
            fused = self.proj_ud(b)

        b = self.bn2(self.bn1(f_hat_wide))
        branch_maps["bottleneck"] = b
        term = self.proj_bn(b)
        fused = term if fused is None else ops.add(fused, term)

        if self.use_down_up:
            x = ops.leaky_relu(self.g1(f_hat_wide))
            x = ops.leaky_relu(self.g2(x))
            x = ops.leaky_relu(self.g3(x))
            x = ops.leaky_relu(self.gu1(ops.upsample2(x)))
            b = self.gu2(ops.upsample2(x))
            branch_maps["down_up"] = b
            fused = ops.add(fused, self.proj_du(b))

        feature = ops.add(self.align_proj(fused), self.align_refine(fused))
        return FstOutput(feature=feature, pixels=pixels, branch_maps=branch_maps)

    def param_count(self) -> int:
        return self.store.param_count()

    def save(self, path) -> None:
        meta = {"task_id": self.task_id, "variant": self.variant, "seed": self.seed}
        tensorio.write_tensors(path, self.store.state_arrays(),
                               config_hash=self.cfg.config_hash(), meta=meta)

    @classmethod
    def load(cls, cfg: ExperimentConfig, path) -> "FeatureSpaceTransform":
        arrays, chash, meta, _ = tensorio.read_tensors(path)
        if chash != cfg.config_hash():
            raise StateError(
                f"FST file hash {chash:#010x} != current config {cfg.config_hash():#010x}")
        fst = cls(cfg, task_id=meta.get("task_id", "seg"),
                  variant=meta.get("variant", "full"), seed=meta.get("seed", 0))
        fst.store.load_arrays(arrays)
        return fst


def identity_projection_baseline(cfg: ExperimentConfig, f_hat_wide: Tensor) -> Tensor:
    """Channel-slice/zero-pad baseline the trained transform must beat."""
    c_in = f_hat_wide.data.shape[0]
    data = f_hat_wide.data
    if c_in >= cfg.c_task:
        return Tensor(data[:cfg.c_task].copy())
    padded = np.zeros((cfg.c_task,) + data.shape[1:], dtype=data.dtype)
    padded[:c_in] = data
    return Tensor(padded)


# ---------------------------------------------------------------------------
# branch statistics (diagnostics)

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def branch_stats(branch_map: np.ndarray) -> dict:
    """Sobel sharpness and the spectral high-frequency ratio of a 2-D map."""
    m = np.asarray(branch_map, dtype=np.float64)
    if m.ndim == 3:
        m = m.mean(axis=0)
    if m.ndim != 2 or m.shape[0] < 3 or m.shape[1] < 3:
        raise ShapeError(f"branch_stats needs a map of at least 3x3, got {m.shape}")
    if m.max() == m.min():
        # all energy at DC; avoids FFT round-off polluting the exact answer
        return {"sharpness": 0.0, "high_freq_ratio": 0.0}

    h, w = m.shape
    gx = np.zeros((h - 2, w - 2))
    gy = np.zeros((h - 2, w - 2))
    for i in range(3):
        for j in range(3):
            patch = m[i:i + h - 2, j:j + w - 2]
            gx += _SOBEL_X[i, j] * patch
            gy += _SOBEL_Y[i, j] * patch
    sharpness = float(np.mean(np.sqrt(gx * gx + gy * gy)))

    spectrum = np.fft.fftshift(np.abs(np.fft.fft2(m)) ** 2)
    total = float(spectrum.sum())
    cy, cx = h // 2, w // 2
    ry, rx = h // 4, w // 4
    central = float(spectrum[cy - ry:cy - ry + h // 2, cx - rx:cx - rx + w // 2].sum())
    ratio = 0.0 if total == 0.0 else 1.0 - central / total
    return {"sharpness": sharpness, "high_freq_ratio": float(ratio)}
