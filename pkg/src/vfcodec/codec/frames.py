"""Frame-level orchestration: the feature codec, its state, and coding.

The encoder always runs the decoder path locally on the quantized latents,
so the reconstruction driving the next reference is bit-identical to what
the standalone decoder produces; drift is impossible by construction.

I-frames store the narrow feature losslessly: its float32 planes are coded
byte-wise by the adaptive range-coder model, so decode reproduces the
feature exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ..config import ExperimentConfig
from ..errors import BitstreamError, StateError
from ..nn import Tensor, no_grad, ops, tensorio
from ..seeding import derive_seed
from . import entropy, rangecoder
from .bitstream import FRAME_I, FRAME_P, FrameRecord
from .conditional import ChannelSqueeze, ConditionalDecoder, ConditionalEncoder
from .interpred import InterPrediction

VARIANTS = ("full", "no-scheme-memc", "no-conditions", "no-perception-loss",
            "no-both-perception", "no-all")


def variant_flags(variant: str) -> dict:
    if variant not in VARIANTS:
        raise StateError(f"unknown codec variant {variant!r}")
    return {
        "schemes": variant not in ("no-scheme-memc", "no-all"),
        "conditions": variant not in ("no-conditions", "no-both-perception", "no-all"),
        "perception_loss": variant not in ("no-perception-loss", "no-both-perception", "no-all"),
    }


@dataclass
class CodecState:
    refresh_interval: int
    frame_index: int = 0
    f_hat_prev: np.ndarray | None = None

    def frame_type(self) -> int:
        return FRAME_I if self.frame_index % self.refresh_interval == 0 else FRAME_P

    def advance(self, f_hat: np.ndarray) -> None:
        self.f_hat_prev = f_hat
        self.frame_index += 1


@dataclass
class EncodeResult:
    record: FrameRecord
    f_hat: np.ndarray
    estimated_bits: dict = field(default_factory=dict)
    stage_maps: list = field(default_factory=list)


class FeatureCodec:
    """Wide-feature in, framed substreams out; holds every learned module."""

    def __init__(self, cfg: ExperimentConfig, world, variant: str = "full", seed: int = 0):
        from ..nn.store import ParameterStore

        self.cfg = cfg
        self.world = world
        self.variant = variant
        self.seed = seed
        self.flags = variant_flags(variant)
        self.store = ParameterStore()
        rng = np.random.default_rng(derive_seed(seed, "codec-init", variant))
        self.squeeze = ChannelSqueeze(self.store, cfg, rng)
        self.inter = InterPrediction(self.store, cfg, rng, use_schemes=self.flags["schemes"])
        self.cond_enc = ConditionalEncoder(self.store, cfg, rng,
                                           with_conditions=self.flags["conditions"])
        self.cond_dec = ConditionalDecoder(self.store, cfg, rng,
                                           with_conditions=self.flags["conditions"])
        self.hyper_m = entropy.HyperCodec(self.store, "ent.m.hyper", cfg.motion_latent,
                                          cfg.hyper_channels, rng)
        self.hyper_r = entropy.HyperCodec(self.store, "ent.r.hyper", cfg.residual_latent,
                                          cfg.hyper_channels, rng)
        self.params_m = entropy.EntropyParams(self.store, "ent.m.params", cfg.motion_latent,
                                              cfg.hyper_channels, cfg.c_narrow,
                                              cfg.codec_width, rng)
        self.params_r = entropy.EntropyParams(self.store, "ent.r.params", cfg.residual_latent,
                                              cfg.hyper_channels, cfg.c_narrow,
                                              cfg.codec_width, rng)

    # -- shared pieces ------------------------------------------------------

    def reduce(self, wide: Tensor) -> Tensor:
        return self.squeeze.reduce(wide)

    def restore(self, narrow: Tensor) -> Tensor:
        return self.squeeze.restore(narrow)

    def conditions_from(self, wide: Tensor):
        """Perception condition; decoder side feeds the compensated feature."""
        return self.world.perception_forward(wide)

    def new_state(self) -> CodecState:
        return CodecState(refresh_interval=self.cfg.refresh_interval)

    def _motion_params(self, hyper_hat: Tensor, f_ref: Tensor):
        return self.params_m(self.hyper_m.decode(hyper_hat), f_ref)

    def _residual_params(self, hyper_hat: Tensor, f_tilde: Tensor):
        return self.params_r(self.hyper_r.decode(hyper_hat), f_tilde)

    # -- eval-mode coding ----------------------------------------------------

    def encode_frame(self, wide_feature, state: CodecState,
                     collect_stages: bool = False) -> EncodeResult:
        if not isinstance(wide_feature, Tensor):
            wide_feature = Tensor(np.asarray(wide_feature, dtype=np.float32))
        with no_grad():
            if state.frame_type() == FRAME_I:
                result = self._encode_iframe(wide_feature)
            else:
                result = self._encode_pframe(wide_feature, state, collect_stages)
        state.advance(result.f_hat)
        return result

    def reconstruct_frame(self, wide_feature, state: CodecState) -> np.ndarray:
        """Reconstruction only (no byte coding); identical values to encode_frame.

        Quantized latents are coded losslessly, so skipping the range coder
        cannot change the reconstruction; transform training uses this path.
        """
        if not isinstance(wide_feature, Tensor):
            wide_feature = Tensor(np.asarray(wide_feature, dtype=np.float32))
        with no_grad():
            if state.frame_type() == FRAME_I:
                f_hat = self.reduce(wide_feature).data.astype(np.float32)
            else:
                f_hat = self._pframe_pass(wide_feature, state, code=False).f_hat
        state.advance(f_hat)
        return f_hat

    def decode_frame(self, record: FrameRecord, state: CodecState) -> np.ndarray:
        expected = state.frame_type()
        if record.frame_type != expected:
            raise StateError(
                f"frame {state.frame_index}: stream says type {record.frame_type}, "
                f"state expects {expected}")
        with no_grad():
            if record.frame_type == FRAME_I:
                f_hat = self._decode_iframe(record)
            else:
                f_hat = self._decode_pframe(record, state)
        state.advance(f_hat)
        return f_hat

    def _narrow_shape(self):
        return (self.cfg.c_narrow, self.cfg.height // 4, self.cfg.width // 4)

    def _encode_iframe(self, wide_feature) -> EncodeResult:
        f_t = self.reduce(wide_feature).data.astype(np.float32)
        raw = f_t.tobytes()
        coded = rangecoder.encode_bytes_adaptive(raw)
        sub = struct.pack("<I", len(raw)) + coded
        return EncodeResult(record=FrameRecord(FRAME_I, (sub,)), f_hat=f_t,
                            estimated_bits={"iframe": len(coded) * 8.0})

    def _decode_iframe(self, record: FrameRecord) -> np.ndarray:
        sub = record.substreams[0]
        if len(sub) < 4:
            raise BitstreamError("I-frame substream shorter than its length field")
        (raw_len,) = struct.unpack("<I", sub[:4])
        shape = self._narrow_shape()
        if raw_len != int(np.prod(shape)) * 4:
            raise BitstreamError(
                f"I-frame payload {raw_len} bytes does not match feature shape {shape}")
        raw = rangecoder.decode_bytes_adaptive(sub[4:], raw_len)
        f_hat = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if not np.all(np.isfinite(f_hat)):
            raise BitstreamError("decoded I-frame holds non-finite values")
        return f_hat

    def _encode_pframe(self, wide_feature, state: CodecState,
                       collect_stages: bool) -> EncodeResult:
        return self._pframe_pass(wide_feature, state, code=True,
                                 collect_stages=collect_stages)

    def _pframe_pass(self, wide_feature, state: CodecState, code: bool,
                     collect_stages: bool = False) -> EncodeResult:
        if state.f_hat_prev is None:
            raise StateError(f"frame {state.frame_index}: P-frame without a reference")
        f_ref = Tensor(state.f_hat_prev)
        f_t = self.reduce(wide_feature)
        est = {}

        # motion branch
        m = self.inter.estimate(f_t, f_ref)
        z = self.inter.encode(m)
        z_hyper_hat = entropy.quantize(self.hyper_m.encode(z), "eval")
        mu_h, sc_h = self.hyper_m.prior.params(*z_hyper_hat.data.shape[1:])
        sub_mh = (entropy.encode_gaussian_latent(z_hyper_hat.data, mu_h.data, sc_h.data)
                  if code else b"")
        est["motion_hyper"] = entropy.estimate_bits(z_hyper_hat, mu_h, sc_h).item()

        mu_m, sc_m = self._motion_params(z_hyper_hat, f_ref)
        z_hat = entropy.quantize(z, "eval")
        sub_m = (entropy.encode_gaussian_latent(z_hat.data, mu_m.data, sc_m.data)
                 if code else b"")
        est["motion"] = entropy.estimate_bits(z_hat, mu_m, sc_m).item()

        m_hat = self.inter.decode(z_hat)
        f_tilde = self.inter.compensate(f_ref, m_hat)
        c_dec = self.conditions_from(self.restore(f_tilde)) if self.flags["conditions"] else None
        c_enc = self.conditions_from(wide_feature) if self.flags["conditions"] else None

        # residual branch
        out = self.cond_enc(f_t, f_tilde, c_enc, want_stages=collect_stages)
        y, stages = out if collect_stages else (out, [])
        y_hyper_hat = entropy.quantize(self.hyper_r.encode(y), "eval")
        mu_rh, sc_rh = self.hyper_r.prior.params(*y_hyper_hat.data.shape[1:])
        sub_rh = (entropy.encode_gaussian_latent(y_hyper_hat.data, mu_rh.data, sc_rh.data)
                  if code else b"")
        est["residual_hyper"] = entropy.estimate_bits(y_hyper_hat, mu_rh, sc_rh).item()

        mu_r, sc_r = self._residual_params(y_hyper_hat, f_tilde)
        y_hat = entropy.quantize(y, "eval")
        sub_r = (entropy.encode_gaussian_latent(y_hat.data, mu_r.data, sc_r.data)
                 if code else b"")
        est["residual"] = entropy.estimate_bits(y_hat, mu_r, sc_r).item()

        f_hat = self.cond_dec(y_hat, f_tilde, c_dec)
        record = FrameRecord(FRAME_P, (sub_mh, sub_m, sub_rh, sub_r))
        stage_maps = [s.data for s in stages]
        if collect_stages:
            stage_maps[-1] = y_hat.data
        return EncodeResult(record=record, f_hat=f_hat.data.astype(np.float32),
                            estimated_bits=est, stage_maps=stage_maps)

    def _decode_pframe(self, record: FrameRecord, state: CodecState) -> np.ndarray:
        if state.f_hat_prev is None:
            raise StateError(f"frame {state.frame_index}: P-frame without a reference")
        f_ref = Tensor(state.f_hat_prev)
        sub_mh, sub_m, sub_rh, sub_r = record.substreams
        cfg = self.cfg
        h, w = cfg.height // 4 // 4, cfg.width // 4 // 4    # latent spatial dims
        hh, hw = h // 4, w // 4                             # hyper spatial dims

        mu_h, sc_h = self.hyper_m.prior.params(hh, hw)
        z_hyper = entropy.decode_gaussian_latent(
            sub_mh, mu_h.data, sc_h.data, (cfg.hyper_channels, hh, hw))
        mu_m, sc_m = self._motion_params(Tensor(z_hyper), f_ref)
        z_hat = entropy.decode_gaussian_latent(
            sub_m, mu_m.data, sc_m.data, (cfg.motion_latent, h, w))

        m_hat = self.inter.decode(Tensor(z_hat))
        f_tilde = self.inter.compensate(f_ref, m_hat)
        c_dec = self.conditions_from(self.restore(f_tilde)) if self.flags["conditions"] else None

        mu_rh, sc_rh = self.hyper_r.prior.params(hh, hw)
        y_hyper = entropy.decode_gaussian_latent(
            sub_rh, mu_rh.data, sc_rh.data, (cfg.hyper_channels, hh, hw))
        mu_r, sc_r = self._residual_params(Tensor(y_hyper), f_tilde)
        y_hat = entropy.decode_gaussian_latent(
            sub_r, mu_r.data, sc_r.data, (cfg.residual_latent, h, w))

        f_hat = self.cond_dec(Tensor(y_hat), f_tilde, c_dec)
        return f_hat.data.astype(np.float32)

    # -- training forward ----------------------------------------------------

    def one_step_reconstruction(self, wide_prev, wide_prev_ref) -> np.ndarray:
        """P-frame reconstruction of frame t-1 against a lossless t-2 reference.

        Supplies realistic (imperfect) references during training so chained
        decoding does not drift outside the training distribution.
        """
        if not isinstance(wide_prev, Tensor):
            wide_prev = Tensor(np.asarray(wide_prev, dtype=np.float32))
        if not isinstance(wide_prev_ref, Tensor):
            wide_prev_ref = Tensor(np.asarray(wide_prev_ref, dtype=np.float32))
        with no_grad():
            state = self.new_state()
            state.f_hat_prev = self.reduce(wide_prev_ref).data.astype(np.float32)
            state.frame_index = 1
            return self._pframe_pass(wide_prev, state, code=False).f_hat

    def train_forward(self, wide_feature: Tensor, f_ref_narrow, rng) -> dict:
        """One P-frame pass with noise quantization; the reference is constant."""
        if isinstance(f_ref_narrow, Tensor):
            f_ref = f_ref_narrow.detach()
        else:
            f_ref = Tensor(np.asarray(f_ref_narrow, dtype=np.float32))
        f_t = self.reduce(wide_feature)

        m = self.inter.estimate(f_t, f_ref)
        z = self.inter.encode(m)
        z_hyper = self.hyper_m.encode(z)
        z_hyper_hat = entropy.quantize(z_hyper, "train", rng)
        mu_h, sc_h = self.hyper_m.prior.params(*z_hyper_hat.data.shape[1:])
        bits_motion_hyper = entropy.estimate_bits(z_hyper_hat, mu_h, sc_h)

        mu_m, sc_m = self._motion_params(z_hyper_hat, f_ref)
        z_hat = entropy.quantize(z, "train", rng)
        bits_motion = entropy.estimate_bits(z_hat, mu_m, sc_m)

        m_hat = self.inter.decode(z_hat)
        f_tilde = self.inter.compensate(f_ref, m_hat)
        wide_tilde = self.restore(f_tilde)
        c_enc = self.conditions_from(wide_feature)
        c_dec = self.conditions_from(wide_tilde) if self.flags["conditions"] else None

        y = self.cond_enc(f_t, f_tilde, c_enc if self.flags["conditions"] else None)
        y_hyper_hat = entropy.quantize(self.hyper_r.encode(y), "train", rng)
        mu_rh, sc_rh = self.hyper_r.prior.params(*y_hyper_hat.data.shape[1:])
        bits_residual_hyper = entropy.estimate_bits(y_hyper_hat, mu_rh, sc_rh)

        mu_r, sc_r = self._residual_params(y_hyper_hat, f_tilde)
        y_hat = entropy.quantize(y, "train", rng)
        bits_residual = entropy.estimate_bits(y_hat, mu_r, sc_r)

        f_hat = self.cond_dec(y_hat, f_tilde, c_dec)
        wide_hat = self.restore(f_hat)

        d_f = ops.mse(wide_feature, wide_hat)
        d_c = ops.mse(wide_feature, wide_tilde)
        perc_hat = self.conditions_from(wide_hat)
        d_p = None
        for p_ref, p_hat in zip(c_enc, perc_hat):
            term = ops.mse(p_ref.detach(), p_hat)
            d_p = term if d_p is None else ops.add(d_p, term)
        d_p = ops.scale(d_p, 1.0 / len(c_enc))

        return {
            "bits_main": ops.add(bits_motion, bits_residual),
            "bits_hyper": ops.add(bits_motion_hyper, bits_residual_hyper),
            "d_f": d_f, "d_c": d_c, "d_p": d_p,
            "f_tilde": f_tilde, "f_hat": f_hat, "wide_hat": wide_hat,
        }

    # -- persistence ---------------------------------------------------------

    def save(self, path, lambda_rate: float | None = None, stage: int = 0, step: int = 0):
        meta = {"variant": self.variant, "seed": self.seed}
        if lambda_rate is not None:
            meta["lambda_rate"] = lambda_rate
        tensorio.write_tensors(path, self.store.state_arrays(),
                               config_hash=self.cfg.config_hash(), meta=meta,
                               stage=stage, step=step)

    @classmethod
    def load(cls, cfg: ExperimentConfig, world, path) -> "FeatureCodec":
        arrays, chash, meta, _ = tensorio.read_tensors(path)
        if chash != cfg.config_hash():
            raise StateError(
                f"checkpoint config hash {chash:#010x} != current config {cfg.config_hash():#010x}")
        codec = cls(cfg, world, variant=meta.get("variant", "full"), seed=meta.get("seed", 0))
        codec.store.load_arrays(arrays)
        codec.meta = meta
        return codec
