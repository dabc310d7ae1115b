"""Reproducible moving-sprite sequences with exact segmentation labels.

Sprites (rectangles and disks, one class each) translate with constant
integer velocities on a torus, so the label mask of frame t+1 is exactly the
frame-t mask rolled by the velocity. Degradations touch frames only, never
labels.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from ..nn import tensorio

DEGRADATIONS = ("none", "lowlight", "gaussian")

# BT.601 full-range RGB <-> YCbCr
_RGB_TO_YCC = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
_YCC_TO_RGB = np.linalg.inv(_RGB_TO_YCC)

_PALETTE = np.array([
    [0.85, 0.25, 0.2],
    [0.2, 0.75, 0.3],
    [0.25, 0.35, 0.9],
    [0.9, 0.8, 0.2],
    [0.8, 0.3, 0.85],
    [0.2, 0.85, 0.8],
    [0.95, 0.55, 0.15],
])


@dataclass
class Sprite:
    kind: str                # "rect" | "disk"
    class_id: int
    y0: int
    x0: int
    size_a: int              # rect height / disk radius
    size_b: int              # rect width  / unused
    vy: int
    vx: int
    tex_freq: float
    tex_angle: float


@dataclass
class VideoSequence:
    frames: list             # each (3, H, W) float32 in [0, 1]
    labels: list             # each (H, W) uint8
    velocities: list         # (vy, vx) per sprite, pixels/frame
    seed: int
    config: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.frames[0].shape


def _sprite_mask(sprite: Sprite, t: int, h: int, w: int) -> np.ndarray:
    cy = (sprite.y0 + sprite.vy * t) % h
    cx = (sprite.x0 + sprite.vx * t) % w
    mask = np.zeros((h, w), dtype=bool)
    if sprite.kind == "rect":
        rows = (cy + np.arange(sprite.size_a)) % h
        cols = (cx + np.arange(sprite.size_b)) % w
        mask[np.ix_(rows, cols)] = True
    else:
        yy = (np.arange(h)[:, None] - cy + h // 2) % h - h // 2
        xx = (np.arange(w)[None, :] - cx + w // 2) % w - w // 2
        mask[yy * yy + xx * xx <= sprite.size_a * sprite.size_a] = True
    return mask


def _sprite_texture(sprite: Sprite, t: int, h: int, w: int) -> np.ndarray:
    # pattern anchored to the sprite so it translates rigidly with it
    oy = (sprite.y0 + sprite.vy * t) % h
    ox = (sprite.x0 + sprite.vx * t) % w
    yy = (np.arange(h)[:, None] - oy) % h
    xx = (np.arange(w)[None, :] - ox) % w
    phase = sprite.tex_freq * (np.cos(sprite.tex_angle) * xx + np.sin(sprite.tex_angle) * yy)
    return 0.78 + 0.22 * np.sin(2.0 * np.pi * phase)


def _background(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy = np.linspace(0.0, 1.0, h)[:, None]
    xx = np.linspace(0.0, 1.0, w)[None, :]
    base = 0.14 + 0.05 * np.sin(2 * np.pi * (xx * 1.5 + 0.3)) + 0.05 * np.cos(2 * np.pi * yy)
    tint = rng.uniform(0.7, 1.0, size=3)
    return np.clip(base[None] * tint[:, None, None], 0.0, 1.0)


def degrade(frame: np.ndarray, mode: str, rng: np.random.Generator) -> np.ndarray:
    if mode == "none":
        return frame
    if mode == "lowlight":
        ycc = np.einsum("ij,jhw->ihw", _RGB_TO_YCC, frame)
        ycc[0] *= 0.3
        out = np.einsum("ij,jhw->ihw", _YCC_TO_RGB, ycc)
        return np.clip(out, 0.0, 1.0)
    if mode == "gaussian":
        noisy = frame + rng.normal(0.0, 25.0 / 255.0, size=frame.shape)
        return np.clip(noisy, 0.0, 1.0)
    raise ConfigError(f"unknown degradation {mode!r}")


def generate_sequence(seed: int, height: int, width: int, num_frames: int = 8,
                      num_sprites: int = 3, max_velocity: int = 2,
                      degradation: str = "none") -> VideoSequence:
    if height % 64 or width % 64:
        raise ConfigError(f"frame dims must be divisible by 64, got {height}x{width}")
    if num_frames < 2:
        raise ConfigError("need at least 2 frames")
    if degradation not in DEGRADATIONS:
        raise ConfigError(f"unknown degradation {degradation!r}")
    if num_sprites > len(_PALETTE) - 1:
        raise ConfigError(f"at most {len(_PALETTE) - 1} sprites supported")

    rng = np.random.default_rng(seed)
    bg = _background(height, width, rng)
    sprites = []
    for i in range(num_sprites):
        kind = "rect" if rng.random() < 0.5 else "disk"
        sprites.append(Sprite(
            kind=kind,
            class_id=i + 1,
            y0=int(rng.integers(0, height)),
            x0=int(rng.integers(0, width)),
            size_a=int(rng.integers(height // 8, height // 3)) if kind == "rect"
                   else int(rng.integers(height // 10, height // 5)),
            size_b=int(rng.integers(width // 8, width // 3)),
            vy=int(rng.integers(-max_velocity, max_velocity + 1)),
            vx=int(rng.integers(-max_velocity, max_velocity + 1)),
            tex_freq=float(rng.uniform(0.06, 0.16)),
            tex_angle=float(rng.uniform(0.0, np.pi)),
        ))

    noise_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD36]))
    frames, labels = [], []
    for t in range(num_frames):
        frame = bg.copy()
        label = np.zeros((height, width), dtype=np.uint8)
        for sprite in sprites:
            mask = _sprite_mask(sprite, t, height, width)
            tex = _sprite_texture(sprite, t, height, width)
            color = _PALETTE[sprite.class_id - 1]
            for c in range(3):
                chan = frame[c]
                chan[mask] = color[c] * tex[mask]
            label[mask] = sprite.class_id
        frame = degrade(np.clip(frame, 0.0, 1.0), degradation, noise_rng)
        frames.append(frame.astype(np.float32))
        labels.append(label)

    cfg = dict(height=height, width=width, num_frames=num_frames, num_sprites=num_sprites,
               max_velocity=max_velocity, degradation=degradation)
    return VideoSequence(frames=frames, labels=labels,
                         velocities=[(s.vy, s.vx) for s in sprites],
                         seed=seed, config=cfg)


def num_classes_of(seq: VideoSequence) -> int:
    return seq.config["num_sprites"] + 1


# ---------------------------------------------------------------------------
# on-disk dataset layout: one directory per sequence


def save_sequence(directory: str, seq: VideoSequence) -> None:
    os.makedirs(directory, exist_ok=True)
    arrays = {f"frame_{i:04d}": f for i, f in enumerate(seq.frames)}
    tensorio.write_tensors(os.path.join(directory, "frames.bin"), arrays)
    with open(os.path.join(directory, "labels.raw"), "wb") as fh:
        for lab in seq.labels:
            fh.write(lab.astype(np.uint8).tobytes())
    manifest = {"seed": seq.seed, "config": seq.config,
                "num_classes": num_classes_of(seq)}
    tmp = os.path.join(directory, "manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    os.replace(tmp, os.path.join(directory, "manifest.json"))


def load_sequence(directory: str) -> VideoSequence:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    cfg = manifest["config"]
    arrays, _, _, _ = tensorio.read_tensors(os.path.join(directory, "frames.bin"))
    frames = [arrays[k] for k in sorted(arrays)]
    h, w = cfg["height"], cfg["width"]
    raw = np.fromfile(os.path.join(directory, "labels.raw"), dtype=np.uint8)
    labels = [plane.reshape(h, w) for plane in raw.reshape(-1, h * w)]
    return VideoSequence(frames=frames, labels=labels, velocities=[],
                         seed=manifest["seed"], config=cfg)
