"""Experiment orchestration: artifact layout, staged runs, reports.

Every artifact is a pure function of (config, seeds), so re-running any
stage with the same config reproduces it byte-identically. Stages can
therefore safely reuse artifacts that already exist when `reuse=True`.

Layout under the output root:

    config.json                     resolved config
    world.bin                       calibrated frozen toy networks
    data/train/seq_NNNN/            training sequences
    data/test/<seed>/seq_NNNN/      test sequences per evaluation seed
    models/codec_<variant>_l<rate>.bin (+ .log.csv)
    models/fst_<variant>.bin (+ .log.csv)
    curves/<variant>.csv            pooled rate-task curve
    curves/<variant>_seed<seed>.csv per-seed curves
    ablation.csv
    diag/                           diagnostic dumps
"""

from __future__ import annotations

import os

from . import evaluate as ev
from .config import ExperimentConfig, save_config
from .errors import ConfigError, StateError
from .fst import FeatureSpaceTransform
from .codec.frames import FeatureCodec
from .seeding import derive_seed
from .training import build_ablation, extract_dataset, train_codec, train_fst
from .world import (create_world, generate_sequence, load_sequence, load_world,
                    save_sequence, save_world)

ALL_ABLATIONS = ("no-scheme-memc", "no-conditions", "no-perception-loss",
                 "no-both-perception", "no-all",
                 "fst-no-up-down", "fst-no-down-up", "fst-bottleneck-only")


def out_root(cfg: ExperimentConfig, override: str | None = None) -> str:
    root = override or os.environ.get("VFCODEC_OUT_ROOT") or cfg.out_root
    os.makedirs(root, exist_ok=True)
    return root


def _codec_path(root, variant, lambda_rate):
    return os.path.join(root, "models", f"codec_{variant}_l{int(lambda_rate)}.bin")


def _fst_path(root, variant):
    return os.path.join(root, "models", f"fst_{variant}.bin")


def world_path(root):
    return os.path.join(root, "world.bin")


# ---------------------------------------------------------------------------
# data and world


def _sequence_reusable(directory: str, cfg: ExperimentConfig, seed: int) -> bool:
    import json

    manifest_path = os.path.join(directory, "manifest.json")
    if not os.path.exists(manifest_path):
        return False
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    want = dict(height=cfg.height, width=cfg.width, num_frames=cfg.num_frames,
                num_sprites=cfg.num_sprites, max_velocity=cfg.max_velocity,
                degradation=cfg.degradation)
    return manifest.get("seed") == seed and manifest.get("config") == want


def _artifact_reusable(path: str, cfg: ExperimentConfig) -> bool:
    from .nn import tensorio

    if not os.path.exists(path):
        return False
    try:
        _, chash, _, _ = tensorio.read_tensors(path)
    except Exception:
        return False
    return chash == cfg.config_hash()


def gen_data(cfg: ExperimentConfig, root: str, reuse: bool = False) -> dict:
    """Write the dataset directories and the calibrated frozen networks."""
    save_config(cfg, os.path.join(root, "config.json"))
    made = {"train": [], "test": {}}
    for i in range(cfg.train_sequences):
        directory = os.path.join(root, "data", "train", f"seq_{i:04d}")
        seed = derive_seed(cfg.seed, "train-data", i)
        if not (reuse and _sequence_reusable(directory, cfg, seed)):
            seq = generate_sequence(
                seed, cfg.height, cfg.width,
                num_frames=cfg.num_frames, num_sprites=cfg.num_sprites,
                max_velocity=cfg.max_velocity, degradation=cfg.degradation)
            save_sequence(directory, seq)
        made["train"].append(directory)
    for eval_seed in cfg.eval_seeds:
        made["test"][eval_seed] = []
        for i in range(cfg.test_sequences):
            directory = os.path.join(root, "data", "test", str(eval_seed), f"seq_{i:04d}")
            seed = derive_seed(eval_seed, "test-data", i)
            if not (reuse and _sequence_reusable(directory, cfg, seed)):
                seq = generate_sequence(
                    seed, cfg.height, cfg.width,
                    num_frames=cfg.num_frames, num_sprites=cfg.num_sprites,
                    max_velocity=cfg.max_velocity, degradation=cfg.degradation)
                save_sequence(directory, seq)
            made["test"][eval_seed].append(directory)
    wpath = world_path(root)
    if not (reuse and _artifact_reusable(wpath, cfg)):
        save_world(wpath, create_world(cfg))
    return made


def load_train_set(cfg, root):
    dirs = sorted(
        d.path for d in os.scandir(os.path.join(root, "data", "train")) if d.is_dir())
    if not dirs:
        raise ConfigError(f"no training data under {root}; run gen-data first")
    return [load_sequence(d) for d in dirs]


def load_test_set(cfg, root, seed):
    base = os.path.join(root, "data", "test", str(seed))
    if not os.path.isdir(base):
        raise ConfigError(f"no test data for seed {seed} under {root}; run gen-data first")
    return [load_sequence(os.path.join(base, name)) for name in sorted(os.listdir(base))]


def get_world(cfg, root):
    path = world_path(root)
    if not os.path.exists(path):
        raise ConfigError(f"missing {path}; run gen-data first")
    return load_world(cfg, path)


# ---------------------------------------------------------------------------
# training stages


def stage_train_codec(cfg, root, world, lambda_rate: float, variant: str = "full",
                      reuse: bool = False, train_seqs=None, features=None) -> str:
    path = _codec_path(root, variant, lambda_rate)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    if reuse and _artifact_reusable(path, cfg):
        return path
    seqs = train_seqs if train_seqs is not None else load_train_set(cfg, root)
    codec, _ = train_codec(cfg, world, seqs, lambda_rate, variant=variant,
                           log_path=path.replace(".bin", ".log.csv"), features=features)
    codec.save(path, lambda_rate=lambda_rate)
    return path


def stage_train_fst(cfg, root, world, variant: str = "full", reuse: bool = False,
                    train_seqs=None) -> str:
    """One transform per study variant, trained on its highest-rate codec."""
    path = _fst_path(root, variant)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    if reuse and _artifact_reusable(path, cfg):
        return path
    spec = build_ablation(variant)
    rate = min(cfg.lambda_rates)          # lowest lambda penalizes rate least
    codec = FeatureCodec.load(cfg, world, _codec_path(root, spec.codec_variant, rate))
    seqs = train_seqs if train_seqs is not None else load_train_set(cfg, root)
    fst, _ = train_fst(cfg, codec, world, seqs, variant=spec.fst_variant,
                       log_path=path.replace(".bin", ".log.csv"))
    fst.save(path)
    return path


def train_variant(cfg, root, world, variant: str, reuse: bool = False,
                  train_seqs=None, features=None) -> None:
    spec = build_ablation(variant)
    seqs = train_seqs if train_seqs is not None else load_train_set(cfg, root)
    feats = features if features is not None else extract_dataset(world, seqs)
    for rate in cfg.lambda_rates:
        stage_train_codec(cfg, root, world, rate, spec.codec_variant,
                          reuse=reuse, train_seqs=seqs, features=feats)
    stage_train_fst(cfg, root, world, variant, reuse=reuse, train_seqs=seqs)


# ---------------------------------------------------------------------------
# evaluation stages


def variant_entries(cfg, root, world, variant: str):
    spec = build_ablation(variant)
    fst = FeatureSpaceTransform.load(cfg, _fst_path(root, variant))
    entries = []
    for rate in sorted(cfg.lambda_rates):
        codec = FeatureCodec.load(cfg, world, _codec_path(root, spec.codec_variant, rate))
        entries.append((codec, fst))
    return entries


def _load_curve_csv(path):
    import csv as csv_mod

    with open(path) as fh:
        rows = list(csv_mod.DictReader(fh))
    return ev.RateTaskCurve(model_id=rows[0]["model_id"],
                            points=[(float(r["bpp"]), float(r["score"])) for r in rows])


def build_curves(cfg, root, world, variant: str, reuse: bool = False):
    """Pooled curve plus one curve per evaluation seed; returns the pooled one.

    Also writes a stats CSV carrying the full per-checkpoint statistics
    (distortion, estimated latent bits) for every (seed, rate) pair.
    """
    import csv as csv_mod

    curve_dir = os.path.join(root, "curves")
    os.makedirs(curve_dir, exist_ok=True)
    pooled_path = os.path.join(curve_dir, f"{variant}.csv")
    seed_paths = {seed: os.path.join(curve_dir, f"{variant}_seed{seed}.csv")
                  for seed in cfg.eval_seeds}
    stats_path = os.path.join(curve_dir, f"{variant}_stats.csv")
    if reuse and os.path.exists(pooled_path) and os.path.exists(stats_path) \
            and all(os.path.exists(p) for p in seed_paths.values()):
        return (_load_curve_csv(pooled_path),
                {seed: _load_curve_csv(p) for seed, p in seed_paths.items()})
    entries = variant_entries(cfg, root, world, variant)
    rates = sorted(cfg.lambda_rates)
    per_seed = {}
    stats_rows = []
    pooled_points = None
    for seed in cfg.eval_seeds:
        seqs = load_test_set(cfg, root, seed)
        curve, results = ev.rate_task_curve(cfg, entries, world, seqs,
                                            model_id=f"{variant}_seed{seed}")
        per_seed[seed] = curve
        for rate, res in zip(rates, results):
            stats_rows.append([seed, rate, res.bpp, res.miou, res.d_f,
                               res.residual_bits, res.motion_bits])
        pts = [(r, s) for r, s in curve.points]
        pooled_points = pts if pooled_points is None else [
            ((a[0] + b[0]), (a[1] + b[1])) for a, b in zip(pooled_points, pts)]
        with open(os.path.join(curve_dir, f"{variant}_seed{seed}.csv"), "w") as fh:
            fh.write(ev.curve_csv(curve))
    n = len(cfg.eval_seeds)
    pooled = ev.RateTaskCurve(model_id=variant,
                              points=[(r / n, s / n) for r, s in pooled_points])
    with open(pooled_path, "w") as fh:
        fh.write(ev.curve_csv(pooled))
    with open(stats_path, "w", newline="") as fh:
        writer = csv_mod.writer(fh)
        writer.writerow(["seed", "lambda_rate", "bpp", "miou", "d_f",
                         "residual_bits", "motion_bits"])
        for row in stats_rows:
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    return pooled, per_seed


def run_ablation(cfg, root, world, variants=ALL_ABLATIONS, reuse: bool = False):
    """Train, evaluate, and report BD-rates of every variant against full."""
    train_seqs = load_train_set(cfg, root)
    features = extract_dataset(world, train_seqs)
    train_variant(cfg, root, world, "full", reuse=reuse,
                  train_seqs=train_seqs, features=features)
    full_curve, _ = build_curves(cfg, root, world, "full", reuse=reuse)
    curves = {}
    params = {"full": _variant_param_count(cfg, root, world, "full")}
    for variant in variants:
        train_variant(cfg, root, world, variant, reuse=reuse,
                      train_seqs=train_seqs, features=features)
        curves[variant], _ = build_curves(cfg, root, world, variant, reuse=reuse)
        params[variant] = _variant_param_count(cfg, root, world, variant)
    rows = ev.ablation_table(full_curve, curves, params)
    with open(os.path.join(root, "ablation.csv"), "w") as fh:
        fh.write(ev.ablation_csv(rows))
    return rows


def _variant_param_count(cfg, root, world, variant) -> int:
    spec = build_ablation(variant)
    rate = min(cfg.lambda_rates)
    codec = FeatureCodec.load(cfg, world, _codec_path(root, spec.codec_variant, rate))
    fst = FeatureSpaceTransform.load(cfg, _fst_path(root, variant))
    return codec.store.param_count() + fst.param_count()


def run_diagnostics(cfg, root, world, variant: str = "full", seq_dir: str | None = None):
    spec = build_ablation(variant)
    rate = min(cfg.lambda_rates)
    codec = FeatureCodec.load(cfg, world, _codec_path(root, spec.codec_variant, rate))
    fst = FeatureSpaceTransform.load(cfg, _fst_path(root, variant))
    if seq_dir is None:
        seq = load_test_set(cfg, root, cfg.eval_seeds[0])[0]
    else:
        seq = load_sequence(seq_dir)
    out_dir = os.path.join(root, "diag", variant)
    return ev.dump_diagnostics(cfg, codec, fst, world, seq, out_dir)


# ---------------------------------------------------------------------------
# stream IO commands


def encode_command(cfg, root, world, checkpoint_path, seq_dir, stream_path,
                   recon_dir: str | None = None):
    from .codec import bitstream
    from .nn import tensorio

    codec = FeatureCodec.load(cfg, world, checkpoint_path)
    seq = load_sequence(seq_dir)
    records, recons, stats = ev.encode_sequence(codec, world, seq)
    blob = bitstream.serialize(records, cfg.width, cfg.height, cfg.config_hash())
    tensorio.atomic_write(stream_path, blob)
    if recon_dir:
        os.makedirs(recon_dir, exist_ok=True)
        arrays = {f"recon_{i:04d}": r for i, r in enumerate(recons)}
        tensorio.write_tensors(os.path.join(recon_dir, "recon.bin"), arrays,
                               config_hash=cfg.config_hash())
    return {"stream": stream_path, "bytes": len(blob),
            "bpp": ev.bpp(blob, cfg.width, cfg.height)}


def decode_command(cfg, root, world, checkpoint_path, stream_path, recon_dir):
    from .codec import bitstream
    from .nn import tensorio

    codec = FeatureCodec.load(cfg, world, checkpoint_path)
    with open(stream_path, "rb") as fh:
        blob = fh.read()
    records, info = bitstream.parse(blob)
    if info["config_hash"] != cfg.config_hash():
        raise StateError(
            f"bitstream config hash {info['config_hash']:#010x} != current "
            f"config {cfg.config_hash():#010x}")
    state = codec.new_state()
    recons = [codec.decode_frame(rec, state) for rec in records]
    os.makedirs(recon_dir, exist_ok=True)
    arrays = {f"recon_{i:04d}": r for i, r in enumerate(recons)}
    tensorio.write_tensors(os.path.join(recon_dir, "recon.bin"), arrays,
                           config_hash=cfg.config_hash())
    return {"frames": len(recons), "recon": os.path.join(recon_dir, "recon.bin")}
