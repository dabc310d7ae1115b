"""Metrics and the experiment harness.

bpp is exact integer arithmetic over measured substream bytes. The
Bjontegaard-delta rate interpolates log-rate against the task score with a
monotone piecewise cubic and integrates it exactly over the overlapping
score interval. entropy_per_pixel follows the 8-bit histogram convention:
total information of the quantized map divided by the pixel count.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator

from .config import ExperimentConfig
from .errors import ShapeError, StateError
from .fst import branch_stats
from .nn import Tensor, no_grad
from .world.metrics import miou as miou_metric
from .codec import bitstream


# ---------------------------------------------------------------------------
# rate metrics


def bpp(stream, width: int, height: int, frames: int | None = None) -> float:
    """8 * payload bytes / (W * H * frames); integer arithmetic up to the division."""
    if width <= 0 or height <= 0:
        raise ShapeError(f"bad frame dims {width}x{height}")
    if isinstance(stream, (bytes, bytearray)):
        records, info = bitstream.parse(bytes(stream))
    else:
        records, info = list(stream), None
    if frames is None:
        frames = len(records) if records else 1
    if frames <= 0:
        raise ShapeError("frame count must be positive")
    payload = bitstream.payload_bytes(records)
    return (8 * payload) / (width * height * frames)


def entropy_per_pixel(feature: np.ndarray, pixels: tuple | None = None) -> float:
    """8-bit-quantized empirical information divided by the pixel count.

    `pixels` overrides the denominator (frame dims for cascade plots);
    defaults to the map's own spatial dims.
    """
    arr = np.asarray(feature, dtype=np.float64)
    if arr.size == 0:
        raise ShapeError("empty tensor")
    if arr.ndim == 2:
        arr = arr[None]
    h, w = arr.shape[-2], arr.shape[-1]
    if pixels is not None:
        h, w = pixels
    lo, hi = float(arr.min()), float(arr.max())
    if hi <= lo:
        return 0.0
    bins = np.minimum((arr - lo) / (hi - lo) * 256.0, 255.0).astype(np.int64)
    counts = np.bincount(bins.reshape(-1), minlength=256)
    probs = counts / counts.sum()
    info = -np.sum(counts[counts > 0] * np.log2(probs[counts > 0]))
    return float(info / (h * w))


# ---------------------------------------------------------------------------
# rate-task curves and the BD-rate


@dataclass
class RateTaskCurve:
    model_id: str
    points: list          # (bpp, score), sorted by bpp

    def __post_init__(self):
        self.points = sorted((float(r), float(s)) for r, s in self.points)
        for r, _ in self.points:
            if r <= 0:
                raise StateError(f"curve {self.model_id!r}: bpp must be positive, got {r}")

    def rates(self):
        return [p[0] for p in self.points]

    def scores(self):
        return [p[1] for p in self.points]


def _curve_points(curve):
    return curve.points if isinstance(curve, RateTaskCurve) else [
        (float(r), float(s)) for r, s in curve]


def _prepare(points):
    by_score = {}
    for rate, score in points:
        if rate <= 0:
            raise StateError(f"rate must be positive, got {rate}")
        by_score.setdefault(score, []).append(np.log(rate))
    scores = np.array(sorted(by_score))
    log_rates = np.array([np.mean(by_score[s]) for s in scores])
    if len(scores) < 2:
        raise StateError("need at least 2 distinct score points for BD-rate")
    return scores, log_rates


def bd_rate(anchor, test) -> float:
    """Average percent rate change of `test` against `anchor` at equal score."""
    a_scores, a_logr = _prepare(_curve_points(anchor))
    t_scores, t_logr = _prepare(_curve_points(test))
    lo = max(a_scores.min(), t_scores.min())
    hi = min(a_scores.max(), t_scores.max())
    if hi <= lo:
        raise StateError(f"no score overlap between curves ([{lo}, {hi}])")
    ia = PchipInterpolator(a_scores, a_logr).antiderivative()
    it = PchipInterpolator(t_scores, t_logr).antiderivative()
    avg_diff = ((it(hi) - it(lo)) - (ia(hi) - ia(lo))) / (hi - lo)
    return float((np.exp(avg_diff) - 1.0) * 100.0)


def spearman(xs, ys) -> float:
    """Spearman rank correlation without external deps (ties get mean ranks)."""
    def ranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        i = 0
        while i < len(v):
            j = i
            while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
                j += 1
            r[order[i:j + 1]] = 0.5 * (i + j) + 1.0
            i = j + 1
        return r

    rx, ry = ranks(xs), ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0:
        return 0.0
    return float((rx * ry).sum() / denom)


# ---------------------------------------------------------------------------
# sequence-level evaluation


def encode_sequence(codec, world, seq):
    """Encode every frame; returns (records, narrow recons, per-substream stats)."""
    state = codec.new_state()
    records, recons, stats = [], [], []
    for frame in seq.frames:
        wide = world.extract_features(frame)
        res = codec.encode_frame(wide, state)
        records.append(res.record)
        recons.append(res.f_hat)
        stats.append(res.estimated_bits)
    return records, recons, stats


def sequence_miou(codec, fst, world, seq, recons, task=None) -> float:
    task = task or world.task
    scores = []
    with no_grad():
        for f_hat, label in zip(recons, seq.labels):
            wide_hat = codec.restore(Tensor(f_hat))
            pred = task.predict(fst(wide_hat).feature)
            scores.append(miou_metric(pred, label, task.num_classes))
    return float(np.mean(scores))


def check_rate_accounting(records, stats) -> None:
    """Measured substream bytes must sit inside the coder-optimality bound."""
    for rec, est in zip(records, stats):
        if rec.frame_type != bitstream.FRAME_P:
            continue
        for name, sub in zip(bitstream.P_SUBSTREAM_NAMES, rec.substreams):
            estimate = est[name]
            if abs(len(sub) * 8.0 - estimate) > 0.001 * estimate + 64.0:
                raise StateError(
                    f"substream {name}: {len(sub) * 8} bits vs estimate {estimate:.1f} "
                    "outside the 0.1% + 64 bit bound")


@dataclass
class EvalResult:
    bpp: float
    miou: float
    d_f: float                  # mean wide-feature MSE
    residual_bits: float        # mean estimated residual-latent bits per P-frame
    motion_bits: float          # mean estimated motion-latent bits per P-frame


def evaluate_checkpoint(cfg: ExperimentConfig, codec, fst, world, sequences,
                        task=None) -> EvalResult:
    """Measured bpp, task score, and distortion statistics over a test set."""
    bpps, mious, d_fs, r_bits, m_bits = [], [], [], [], []
    for seq in sequences:
        records, recons, stats = encode_sequence(codec, world, seq)
        check_rate_accounting(records, stats)
        blob = bitstream.serialize(records, cfg.width, cfg.height, cfg.config_hash())
        bpps.append(bpp(blob, cfg.width, cfg.height))
        mious.append(sequence_miou(codec, fst, world, seq, recons, task))
        with no_grad():
            for frame, f_hat in zip(seq.frames, recons):
                wide = world.extract_features(frame)
                wide_hat = codec.restore(Tensor(f_hat))
                d_fs.append(float(np.mean((wide.data - wide_hat.data) ** 2)))
        for est in stats:
            if "residual" in est:
                r_bits.append(est["residual"])
                m_bits.append(est["motion"])
    return EvalResult(bpp=float(np.mean(bpps)), miou=float(np.mean(mious)),
                      d_f=float(np.mean(d_fs)),
                      residual_bits=float(np.mean(r_bits)) if r_bits else 0.0,
                      motion_bits=float(np.mean(m_bits)) if m_bits else 0.0)


def entropy_cascade_fraction(cfg: ExperimentConfig, codec, world, sequences) -> float:
    """Fraction of P-frames whose stage entropies strictly decrease."""
    ok = 0
    total = 0
    for seq in sequences:
        state = codec.new_state()
        for frame in seq.frames:
            wide = world.extract_features(frame)
            res = codec.encode_frame(wide, state, collect_stages=True)
            if res.record.frame_type != bitstream.FRAME_P:
                continue
            values = [entropy_per_pixel(s, pixels=(cfg.height, cfg.width))
                      for s in res.stage_maps]
            total += 1
            if all(b < a for a, b in zip(values, values[1:])):
                ok += 1
    return ok / total if total else 0.0


def subtraction_residual_bits(cfg: ExperimentConfig, codec, world, seq) -> float:
    """Mean bits per P-frame to code round(f_t - f_tilde) losslessly (step 1)."""
    from .codec import rangecoder
    from .codec.entropy import quantize

    state = codec.new_state()
    bits = []
    with no_grad():
        for frame in seq.frames:
            wide = world.extract_features(frame)
            if state.frame_type() != bitstream.FRAME_P:
                codec.encode_frame(wide, state)
                continue
            f_ref = Tensor(state.f_hat_prev)
            f_t = codec.reduce(wide)
            m_hat = quantize(codec.inter.encode(codec.inter.estimate(f_t, f_ref)), "eval")
            f_tilde = codec.inter.compensate(f_ref, codec.inter.decode(m_hat))
            residual = quantize(Tensor(f_t.data - f_tilde.data), "eval").data
            payload = np.clip(residual, -32768, 32767).astype("<i2").tobytes()
            coded = rangecoder.encode_bytes_adaptive(payload)
            bits.append(len(coded) * 8.0)
            codec.encode_frame(wide, state)
    return float(np.mean(bits)) if bits else 0.0


def rate_task_curve(cfg: ExperimentConfig, entries, world, sequences,
                    model_id: str = "model", task=None):
    """entries: list of (codec, fst) pairs, one per rate point.

    Returns (curve, results): the curve carries (bpp, miou) points; results
    keep the full per-checkpoint statistics in entry order.
    """
    if len(entries) < 2:
        raise StateError("need at least 2 checkpoints for a curve")
    results = [evaluate_checkpoint(cfg, codec, fst, world, sequences, task)
               for codec, fst in entries]
    curve = RateTaskCurve(model_id=model_id,
                          points=[(r.bpp, r.miou) for r in results])
    return curve, results


# ---------------------------------------------------------------------------
# reports


def curve_csv(curve: RateTaskCurve) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["model_id", "bpp", "score"])
    for rate, score in curve.points:
        writer.writerow([curve.model_id, repr(rate), repr(score)])
    return buf.getvalue()


def ablation_table(full_curve: RateTaskCurve, variant_curves: dict,
                   param_counts: dict | None = None) -> list:
    """Rows of (variant, bd_rate vs full, params). Full-model row is 0 by definition."""
    rows = [("full", 0.0, (param_counts or {}).get("full"))]
    for name in sorted(variant_curves):
        rows.append((name, bd_rate(full_curve, variant_curves[name]),
                     (param_counts or {}).get(name)))
    return rows


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["variant", "bd_rate_percent", "param_count"])
    for name, bd, params in rows:
        writer.writerow([name, repr(float(bd)), "" if params is None else int(params)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# diagnostics dumps


def _to_gray(img: np.ndarray) -> np.ndarray:
    m = np.asarray(img, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi <= lo:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def _save_gray(path, img: np.ndarray) -> None:
    from PIL import Image
    Image.fromarray(_to_gray(img), mode="L").save(path)


def dump_diagnostics(cfg: ExperimentConfig, codec, fst, world, seq, out_dir,
                     inspect_channels=(0,)) -> dict:
    """Grayscale dumps plus a CSV of every number plotted.

    Emits motion-representation channels, the per-channel scheme maps,
    compensated-vs-current features, the conditional-encoder entropy cascade,
    and transform branch maps with their statistics.
    """
    os.makedirs(out_dir, exist_ok=True)
    from .codec.interpred import SchemeCompensator

    numbers = []
    state = codec.new_state()
    cascade_rows = []
    first_p_seen = False
    for t, frame in enumerate(seq.frames):
        wide = world.extract_features(frame)
        f_ref = state.f_hat_prev
        res = codec.encode_frame(wide, state, collect_stages=True)
        if res.record.frame_type != bitstream.FRAME_P:
            continue
        entropies = [entropy_per_pixel(s, pixels=(cfg.height, cfg.width))
                     for s in res.stage_maps]
        cascade_rows.append([t] + entropies)
        if first_p_seen:
            continue
        first_p_seen = True

        with no_grad():
            f_t = codec.reduce(wide)
            ref_t = Tensor(f_ref)
            m = codec.inter.estimate(f_t, ref_t)
            for ch in range(min(8, m.data.shape[0])):
                _save_gray(os.path.join(out_dir, f"motion_ch{ch:02d}.png"), m.data[ch])
            if isinstance(codec.inter.compensator, SchemeCompensator):
                schemes = codec.inter.compensator.scheme_maps(ref_t).data
                s_count = codec.inter.compensator.schemes
                for ch in inspect_channels:
                    for k in range(s_count):
                        _save_gray(os.path.join(out_dir, f"scheme_c{ch}_s{k}.png"),
                                   schemes[ch * s_count + k])
            _save_gray(os.path.join(out_dir, "feature_current.png"), f_t.data.mean(axis=0))
            _save_gray(os.path.join(out_dir, "feature_reconstructed.png"),
                       res.f_hat.mean(axis=0))

            out = fst(codec.restore(Tensor(res.f_hat)))
            for name, bmap in out.branch_maps.items():
                _save_gray(os.path.join(out_dir, f"branch_{name}.png"), bmap.data.mean(axis=0))
                stats = branch_stats(bmap.data.mean(axis=0))
                numbers.append(["branch_" + name, stats["sharpness"], stats["high_freq_ratio"]])
            if out.pixels is not None:
                _save_gray(os.path.join(out_dir, "coarse_frame.png"), out.pixels.data.mean(axis=0))

    with open(os.path.join(out_dir, "entropy_cascade.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "stage_input", "stage1", "stage2", "stage3", "latent"])
        for row in cascade_rows:
            writer.writerow([row[0]] + [repr(v) for v in row[1:]])
    with open(os.path.join(out_dir, "branch_stats.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "sharpness", "high_freq_ratio"])
        for row in numbers:
            writer.writerow([row[0], repr(row[1]), repr(row[2])])
    return {"cascade": cascade_rows, "branch_stats": numbers}
