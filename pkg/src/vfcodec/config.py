"""Experiment configuration: schema, validation, hashing, presets.

Loading is fail-closed: unknown keys are rejected by name. The config hash
is embedded in every artifact (checkpoints, bitstreams, reports) so mixing
artifacts from different configs fails loudly. `out_root` is excluded from
the hash because relocating artifacts does not change their content.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass
class ExperimentConfig:
    # seeds
    seed: int = 7
    world_seed: int = 101
    train_seed: int = 202
    eval_seeds: tuple = (301, 302, 303)

    # dataset
    height: int = 64
    width: int = 64
    num_frames: int = 16
    num_sprites: int = 3
    max_velocity: int = 2
    degradation: str = "none"
    train_sequences: int = 12
    test_sequences: int = 6
    calib_sequences: int = 6

    # model dims (c_feat is the wide width; the codec runs at c_feat // 4)
    c_feat: int = 64
    c_m: int = 64
    c_p: int = 32
    c_task: int = 48
    schemes: int = 8
    motion_latent: int = 64
    residual_latent: int = 96
    hyper_channels: int = 32
    codec_width: int = 48          # internal width of codec transforms
    task_width: int = 64
    fst_width: int = 16

    # rate-distortion training
    lambda_rates: tuple = (16.0, 32.0, 128.0, 256.0)
    lambda_f: float = 16.0
    lambda_c: float | None = None  # defaults to 0.1 * lambda_f
    lambda_p: float = 4.0
    stage_steps: tuple = (150, 150, 150, 150, 150)
    batch_size: int = 4

    # feature space transform training (semantic segmentation weights)
    lambda_mid: float = 16.0
    lambda_high: float = 64.0
    lambda_x: float = 1024.0
    lambda_task: float = 10.0
    fst_steps: int = 800
    fst_lr: float = 1e-3

    # toy-network calibration
    calib_steps: int = 350
    calib_lr: float = 2e-3

    # coding
    refresh_interval: int = 12

    # paths (kept out of the config hash)
    out_root: str = "out"

    def __post_init__(self):
        if self.lambda_c is None:
            self.lambda_c = 0.1 * self.lambda_f
        self.eval_seeds = tuple(self.eval_seeds)
        self.lambda_rates = tuple(float(x) for x in self.lambda_rates)
        self.stage_steps = tuple(int(x) for x in self.stage_steps)
        self.validate()

    def validate(self):
        if self.height % 64 or self.width % 64:
            raise ConfigError(f"height/width must be divisible by 64, got {self.height}x{self.width}")
        if self.c_feat % 4:
            raise ConfigError("c_feat must be divisible by 4 (4:1 channel squeeze)")
        if len(self.stage_steps) != 5:
            raise ConfigError(f"stage_steps needs exactly 5 entries, got {len(self.stage_steps)}")
        if len(self.lambda_rates) < 1:
            raise ConfigError("need at least one rate point")
        if self.schemes < 1:
            raise ConfigError("schemes must be >= 1")
        if self.num_sprites < 1 or self.num_sprites > 6:
            raise ConfigError("num_sprites must be in 1..6")
        if self.refresh_interval < 1:
            raise ConfigError("refresh_interval must be >= 1")
        if self.degradation not in ("none", "lowlight", "gaussian"):
            raise ConfigError(f"unknown degradation {self.degradation!r}")
        for name in ("lambda_f", "lambda_c", "lambda_p", "lambda_mid", "lambda_high",
                     "lambda_x", "lambda_task"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    @property
    def c_narrow(self) -> int:
        return self.c_feat // 4

    @property
    def num_classes(self) -> int:
        return self.num_sprites + 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> int:
        payload = self.to_dict()
        payload.pop("out_root")
        blob = json.dumps(payload, sort_keys=True).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:4], "big")

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def toy(cls, **overrides) -> "ExperimentConfig":
        """Small widths for CPU-budget experiments; contracts unchanged."""
        base = dict(
            c_feat=32, c_m=16, c_p=12, c_task=48, motion_latent=12,
            residual_latent=16, hyper_channels=8, codec_width=24,
            task_width=64, fst_width=16,
        )
        base.update(overrides)
        return cls(**base)


_FIELD_NAMES = {f.name for f in dataclasses.fields(ExperimentConfig)}


def config_from_dict(raw: dict) -> ExperimentConfig:
    unknown = sorted(set(raw) - _FIELD_NAMES)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return ExperimentConfig(**raw)


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return config_from_dict(raw)


def save_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, sort_keys=True, indent=1)
