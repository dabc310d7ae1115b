"""Two-stage optimization and ablation constructions.

Codec training follows the five-stage schedule: learning rates
(1e-4, 1e-4, 1e-4, 5e-5, 1e-5) with the rate term growing from half-weight
main-latent-only (stage 1) through half-weight full rate (stage 2) to full
weight (stages 3-5). Distortions: feature MSE, compensation MSE, and the
perception-space distortion averaged over the five pyramid levels.

Transform training runs against a frozen codec and frozen task networks;
checksums guard the freeze discipline. References during codec training are
the losslessly reconstructed previous-frame features, detached.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields

import numpy as np

from .config import ExperimentConfig
from .errors import NumericsError, StateError
from .fst import FeatureSpaceTransform, FstOutput
from .nn import Tensor, adam_step, no_grad, ops
from .seeding import derive_seed

STAGE_LEARNING_RATES = (1e-4, 1e-4, 1e-4, 5e-5, 1e-5)

CODEC_ABLATIONS = ("no-scheme-memc", "no-conditions", "no-perception-loss",
                   "no-both-perception", "no-all")
FST_ABLATIONS = ("fst-no-up-down", "fst-no-down-up", "fst-bottleneck-only")


@dataclass
class AblationSpec:
    name: str
    codec_variant: str
    fst_variant: str


def build_ablation(variant: str) -> AblationSpec:
    """Map a study name to the structural configuration it trains."""
    if variant == "full":
        return AblationSpec("full", "full", "full")
    if variant in CODEC_ABLATIONS:
        return AblationSpec(variant, variant, "full")
    if variant in FST_ABLATIONS:
        return AblationSpec(variant, "full", variant.removeprefix("fst-"))
    raise StateError(f"unknown ablation variant {variant!r}")


@dataclass
class LossReport:
    step: int
    stage: int
    lr: float
    r_y: float          # main-latent bits per pixel
    r_z: float          # hyper-latent bits per pixel
    d_f: float
    d_c: float
    d_p: float
    total: float

    @staticmethod
    def csv_header():
        return [f.name for f in fields(LossReport)]

    def csv_row(self):
        return [repr(getattr(self, f.name)) for f in fields(LossReport)]


@dataclass
class FstLossReport:
    step: int
    l_task: float
    d_x: float
    d_mid: float
    d_high: float
    total: float

    @staticmethod
    def csv_header():
        return [f.name for f in fields(FstLossReport)]

    def csv_row(self):
        return [repr(getattr(self, f.name)) for f in fields(FstLossReport)]


def rate_weights(lambda_rate: float, stage: int):
    """(main weight, hyper weight) per the staged schedule."""
    if stage == 1:
        return 0.5 * lambda_rate, 0.0
    if stage == 2:
        return 0.5 * lambda_rate, 0.5 * lambda_rate
    if stage in (3, 4, 5):
        return lambda_rate, lambda_rate
    raise StateError(f"stage must be in 1..5, got {stage}")


def codec_loss(artifacts: dict, cfg: ExperimentConfig, lambda_rate: float, stage: int,
               perception_loss_active: bool = True):
    """Weighted single-sample loss tensor plus its per-term breakdown."""
    pixels = float(cfg.height * cfg.width)
    r_y = ops.scale(artifacts["bits_main"], 1.0 / pixels)
    r_z = ops.scale(artifacts["bits_hyper"], 1.0 / pixels)
    w_y, w_z = rate_weights(lambda_rate, stage)
    lambda_p = cfg.lambda_p if perception_loss_active else 0.0

    total = ops.scale(r_y, w_y)
    if w_z:
        total = ops.add(total, ops.scale(r_z, w_z))
    total = ops.add(total, ops.scale(artifacts["d_f"], cfg.lambda_f))
    total = ops.add(total, ops.scale(artifacts["d_c"], cfg.lambda_c))
    if lambda_p:
        total = ops.add(total, ops.scale(artifacts["d_p"], lambda_p))

    terms = {
        "r_y": r_y.item(), "r_z": r_z.item(),
        "d_f": artifacts["d_f"].item(), "d_c": artifacts["d_c"].item(),
        "d_p": artifacts["d_p"].item(), "total": total.item(),
        "weights": {"r_y": w_y, "r_z": w_z, "d_f": cfg.lambda_f,
                    "d_c": cfg.lambda_c, "d_p": lambda_p},
    }
    return total, terms


def extract_dataset(world, sequences):
    """Wide features for every frame of every sequence, precomputed once."""
    out = []
    with no_grad():
        for seq in sequences:
            out.append([world.extract_features(f).data for f in seq.frames])
    return out


def train_codec(cfg: ExperimentConfig, world, sequences, lambda_rate: float,
                variant: str = "full", seed: int = 0, log_path=None,
                features=None):
    """Five-stage rate-distortion training at one rate point."""
    from .codec.frames import FeatureCodec

    if not sequences:
        raise StateError("training dataset is empty")
    codec = FeatureCodec(cfg, world, variant=variant, seed=seed)
    feats = features if features is not None else extract_dataset(world, sequences)
    rng = np.random.default_rng(
        derive_seed(cfg.train_seed, "codec", variant, seed, int(lambda_rate)))
    perception_active = codec.flags["perception_loss"]

    log_rows = []
    global_step = 0
    for stage_idx, (steps, lr) in enumerate(zip(cfg.stage_steps, STAGE_LEARNING_RATES), 1):
        for _ in range(steps):
            batch_total = None
            batch_terms = []
            for _ in range(cfg.batch_size):
                si = int(rng.integers(len(feats)))
                t = int(rng.integers(1, len(feats[si])))
                wide_t = Tensor(feats[si][t])
                try:
                    # previous reconstructed feature, detached: exact for the
                    # I-frame neighbour, the codec's own one-step P-frame
                    # reconstruction deeper into the sequence
                    if t == 1:
                        with no_grad():
                            f_ref = codec.reduce(Tensor(feats[si][0])).data
                    else:
                        f_ref = codec.one_step_reconstruction(feats[si][t - 1],
                                                              feats[si][t - 2])
                    artifacts = codec.train_forward(wide_t, f_ref, rng)
                    total, terms = codec_loss(artifacts, cfg, lambda_rate, stage_idx,
                                              perception_active)
                except NumericsError as exc:
                    raise StateError(
                        f"training diverged at stage {stage_idx} step {global_step}: {exc}"
                    ) from exc
                batch_total = total if batch_total is None else ops.add(batch_total, total)
                batch_terms.append(terms)
            loss = ops.scale(batch_total, 1.0 / cfg.batch_size)
            if not np.isfinite(loss.data):
                raise StateError(f"training diverged at stage {stage_idx} step {global_step}")
            loss.backward()
            if stage_idx == 1:
                # the stage-1 loss has no hyper-rate term, so the factorized
                # priors' true gradient is exactly zero
                for name, t in codec.store.items():
                    if t.grad is None and ".prior." in name:
                        t.grad = np.zeros(t.data.shape, dtype=codec.store.dtype)
            adam_step(codec.store, lr)
            mean = {k: float(np.mean([t[k] for t in batch_terms]))
                    for k in ("r_y", "r_z", "d_f", "d_c", "d_p", "total")}
            log_rows.append(LossReport(step=global_step, stage=stage_idx, lr=lr, **mean))
            global_step += 1

    if log_path is not None:
        write_loss_log(log_path, log_rows, LossReport)
    codec.meta = {"lambda_rate": lambda_rate, "variant": variant, "seed": seed}
    return codec, log_rows


def write_loss_log(path, rows, report_cls) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(report_cls.csv_header())
        for row in rows:
            writer.writerow(row.csv_row())


# ---------------------------------------------------------------------------
# feature space transform training


def fst_loss(out: FstOutput, target: dict, cfg: ExperimentConfig, task):
    """Eq-style weighted sum: task loss, pixel, mid-feature, high-feature terms."""
    feature_target = Tensor(target["task_feature"])
    l_task = ops.softmax_cross_entropy(task.head(out.feature), target["label"])
    d_mid = ops.mse(out.feature, feature_target)
    highs = task.high_levels(out.feature)
    d_high = None
    for ref, got in zip(target["high_targets"], highs):
        term = ops.mse(Tensor(ref), got)
        d_high = term if d_high is None else ops.add(d_high, term)
    d_high = ops.scale(d_high, 1.0 / len(highs))

    total = ops.add(ops.scale(l_task, cfg.lambda_task), ops.scale(d_mid, cfg.lambda_mid))
    total = ops.add(total, ops.scale(d_high, cfg.lambda_high))
    d_x_val = 0.0
    if out.pixels is not None:
        d_x = ops.mse(out.pixels, Tensor(target["frame"]))
        total = ops.add(total, ops.scale(d_x, cfg.lambda_x))
        d_x_val = d_x.item()
    terms = {"l_task": l_task.item(), "d_x": d_x_val, "d_mid": d_mid.item(),
             "d_high": d_high.item(), "total": total.item(),
             "weights": {"l_task": cfg.lambda_task, "d_x": cfg.lambda_x,
                         "d_mid": cfg.lambda_mid, "d_high": cfg.lambda_high}}
    return total, terms


def build_fst_samples(cfg: ExperimentConfig, codec, world, sequences, task=None):
    """Reconstruct every frame through the frozen codec and cache FST targets."""
    task = task or world.task
    samples = []
    with no_grad():
        for seq in sequences:
            state = codec.new_state()
            for frame, label in zip(seq.frames, seq.labels):
                wide = world.extract_features(frame)
                f_hat = codec.reconstruct_frame(wide, state)
                wide_hat = codec.restore(Tensor(f_hat)).data
                task_feature = task.stem(Tensor(frame)).data
                high_targets = [h.data for h in task.high_levels(Tensor(task_feature))]
                samples.append({
                    "f_hat_wide": wide_hat, "frame": frame, "label": label,
                    "task_feature": task_feature, "high_targets": high_targets,
                })
    return samples


def train_fst(cfg: ExperimentConfig, codec, world, sequences, variant: str = "full",
              seed: int = 0, task=None, task_id: str = "seg", steps=None, lr=None,
              log_path=None, samples=None):
    """Optimize one transform; every other module must stay bit-identical."""
    task = task or world.task
    steps = cfg.fst_steps if steps is None else steps
    lr = cfg.fst_lr if lr is None else lr

    codec_before = codec.store.checksum()
    world_before = world.checksum()
    task_before = task.store.checksum()

    fst = FeatureSpaceTransform(cfg, task_id=task_id, variant=variant, seed=seed)
    if samples is None:
        samples = build_fst_samples(cfg, codec, world, sequences, task)
    if not samples:
        raise StateError("no samples for transform training")
    rng = np.random.default_rng(derive_seed(cfg.train_seed, "fst", variant, seed, task_id))

    log_rows = []
    for step in range(steps):
        sample = samples[int(rng.integers(len(samples)))]
        out = fst(Tensor(sample["f_hat_wide"]))
        try:
            total, terms = fst_loss(out, sample, cfg, task)
        except NumericsError as exc:
            raise StateError(f"transform training diverged at step {step}: {exc}") from exc
        total.backward()
        adam_step(fst.store, lr)
        log_rows.append(FstLossReport(
            step=step, l_task=terms["l_task"], d_x=terms["d_x"],
            d_mid=terms["d_mid"], d_high=terms["d_high"], total=terms["total"]))

    if codec.store.checksum() != codec_before:
        raise StateError("freeze violation: codec parameters changed during FST training")
    if world.checksum() != world_before or task.store.checksum() != task_before:
        raise StateError("freeze violation: frozen task/perception networks changed")
    if log_path is not None:
        write_loss_log(log_path, log_rows, FstLossReport)
    return fst, log_rows
