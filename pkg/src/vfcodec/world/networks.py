"""Frozen toy networks: backbone, perception pyramid, and segmentation task.

The backbone stands in for shallow layers of a detection backbone: three
convs with two stride-2 stages, so features sit at 1/4 of the image with
`c_feat` channels. The perception net emits five pyramid levels at feature-
relative scales {1, 1/2, 1/4, 1/8, 1/16}. The task net has its own stem
(the oracle feature space the transform must hit), a small high-level
pyramid, and a per-pixel classification head.

Perception and task nets are briefly calibrated on seeded synthetic data at
creation (so their outputs carry class structure, as the pretrained networks
they replace would), then frozen. Any later mutation is a defect.
"""

from __future__ import annotations

import numpy as np

from ..config import ExperimentConfig
from ..errors import ShapeError, StateError
from ..nn import ParameterStore, Tensor, adam_step, ops, tensorio
from ..nn.layers import Conv2d
from ..seeding import derive_seed
from . import sprites


class Backbone:
    def __init__(self, cfg: ExperimentConfig, rng):
        self.store = ParameterStore()
        cf = cfg.c_feat
        self.c1 = Conv2d(self.store, "bb.c1", 3, cf // 2, stride=2, rng=rng)
        self.c2 = Conv2d(self.store, "bb.c2", cf // 2, cf, stride=2, rng=rng)
        self.c3 = Conv2d(self.store, "bb.c3", cf, cf, rng=rng)

    def __call__(self, frame) -> Tensor:
        if frame.data.shape[1] % 4 or frame.data.shape[2] % 4:
            raise ShapeError(f"frame dims must be divisible by 4, got {frame.data.shape}")
        x = ops.leaky_relu(self.c1(frame))
        x = ops.leaky_relu(self.c2(x))
        return self.c3(x)


class PerceptionNet:
    """Five-level feature pyramid over the wide feature."""

    LEVELS = 5

    def __init__(self, cfg: ExperimentConfig, rng):
        self.store = ParameterStore()
        self.lateral = Conv2d(self.store, "pn.lat", cfg.c_feat, cfg.c_p, rng=rng)
        self.downs = [Conv2d(self.store, f"pn.d{k}", cfg.c_p, cfg.c_p, stride=2, rng=rng)
                      for k in range(self.LEVELS - 1)]

    def __call__(self, feature) -> list:
        _, h, w = feature.data.shape
        if h % 16 or w % 16:
            raise ShapeError(f"perception input dims must be divisible by 16, got {h}x{w}")
        p = self.lateral(feature)
        outs = [p]
        for down in self.downs:
            p = down(ops.leaky_relu(p))
            outs.append(p)
        return outs


class TaskNet:
    """Toy semantic segmentation network (stem + high-level pyramid + head)."""

    HIGH_LEVELS = 3

    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.store = ParameterStore()
        self.c_task = cfg.c_task
        self.num_classes = cfg.num_classes
        rng = np.random.default_rng(derive_seed(seed, "task-init"))
        tw = cfg.task_width
        self.s1 = Conv2d(self.store, "task.s1", 3, tw, stride=2, rng=rng)
        self.s2 = Conv2d(self.store, "task.s2", tw, tw, stride=2, rng=rng)
        self.s3 = Conv2d(self.store, "task.s3", tw, cfg.c_task, rng=rng)
        self.hi = [Conv2d(self.store, f"task.h{k}", cfg.c_task if k == 0 else tw, tw,
                          stride=2, rng=rng) for k in range(self.HIGH_LEVELS)]
        self.d1 = Conv2d(self.store, "task.d1", cfg.c_task, tw, rng=rng)
        self.d2 = Conv2d(self.store, "task.d2", tw, tw, rng=rng)
        self.d3 = Conv2d(self.store, "task.d3", tw, cfg.num_classes, ksize=1, rng=rng)

    def stem(self, frame) -> Tensor:
        x = ops.leaky_relu(self.s1(frame))
        x = ops.leaky_relu(self.s2(x))
        return self.s3(x)

    def high_levels(self, task_feature) -> list:
        outs = []
        x = task_feature
        for conv in self.hi:
            x = conv(ops.leaky_relu(x))
            outs.append(x)
        return outs

    def head(self, task_feature) -> Tensor:
        if task_feature.data.shape[0] != self.c_task:
            raise ShapeError(
                f"task head expects {self.c_task} channels, got {task_feature.data.shape[0]}")
        x = ops.leaky_relu(self.d1(task_feature))
        x = ops.upsample2(x)
        x = ops.leaky_relu(self.d2(x))
        x = ops.upsample2(x)
        return self.d3(x)

    def predict(self, task_feature) -> np.ndarray:
        return np.argmax(self.head(task_feature).data, axis=0)


class ToyWorld:
    """Container for the three frozen networks plus provenance."""

    def __init__(self, cfg: ExperimentConfig, backbone, perception, task):
        self.cfg = cfg
        self.backbone = backbone
        self.perception = perception
        self.task = task

    def extract_features(self, frame) -> Tensor:
        if not isinstance(frame, Tensor):
            frame = Tensor(np.asarray(frame, dtype=np.float32))
        return self.backbone(frame)

    def perception_forward(self, feature) -> list:
        return self.perception(feature)

    def checksum(self) -> str:
        return (self.backbone.store.checksum() + self.perception.store.checksum()
                + self.task.store.checksum())

    def assert_frozen(self, reference_checksum: str) -> None:
        if self.checksum() != reference_checksum:
            raise StateError("frozen toy networks were mutated")


def _calibration_pool(cfg: ExperimentConfig):
    pool = []
    for i in range(cfg.calib_sequences):
        seq = sprites.generate_sequence(
            derive_seed(cfg.world_seed, "calib", i),
            cfg.height, cfg.width, num_frames=4, num_sprites=cfg.num_sprites,
            max_velocity=cfg.max_velocity, degradation="none")
        pool.extend(zip(seq.frames, seq.labels))
    return pool


def _calibrate_task(task: TaskNet, cfg: ExperimentConfig, pool) -> None:
    aux = ParameterStore()
    rng = np.random.default_rng(derive_seed(cfg.world_seed, "task-calib"))
    heads = [Conv2d(aux, f"aux.h{k}", cfg.task_width, cfg.num_classes, ksize=1, rng=rng)
             for k in range(TaskNet.HIGH_LEVELS)]
    for _ in range(cfg.calib_steps):
        frame, label = pool[rng.integers(len(pool))]
        tf = task.stem(Tensor(frame))
        loss = ops.softmax_cross_entropy(task.head(tf), label)
        for k, hm in enumerate(task.high_levels(tf)):
            stride = 8 << k
            loss = ops.add(loss, ops.scale(
                ops.softmax_cross_entropy(heads[k](hm), label[::stride, ::stride]), 0.3))
        loss.backward()
        adam_step(task.store, cfg.calib_lr)
        adam_step(aux, cfg.calib_lr)


def _calibrate_perception(world_backbone: Backbone, pn: PerceptionNet,
                          cfg: ExperimentConfig, pool) -> None:
    aux = ParameterStore()
    rng = np.random.default_rng(derive_seed(cfg.world_seed, "pn-calib"))
    heads = [Conv2d(aux, f"aux.p{k}", cfg.c_p, cfg.num_classes, ksize=1, rng=rng)
             for k in range(PerceptionNet.LEVELS)]
    for _ in range(cfg.calib_steps // 2):
        frame, label = pool[rng.integers(len(pool))]
        feat = world_backbone(Tensor(frame))
        loss = None
        for k, p in enumerate(pn(feat)):
            stride = 4 << k
            term = ops.softmax_cross_entropy(heads[k](p), label[::stride, ::stride])
            loss = term if loss is None else ops.add(loss, term)
        loss.backward()
        adam_step(pn.store, cfg.calib_lr)
        adam_step(aux, cfg.calib_lr)


def create_task_net(cfg: ExperimentConfig, seed: int, pool=None) -> TaskNet:
    task = TaskNet(cfg, seed)
    local_cfg = cfg if seed == cfg.world_seed else cfg.replace(world_seed=seed)
    _calibrate_task(task, local_cfg, pool if pool is not None else _calibration_pool(local_cfg))
    task.store.freeze()
    return task


def create_world(cfg: ExperimentConfig) -> ToyWorld:
    rng = np.random.default_rng(derive_seed(cfg.world_seed, "world-init"))
    backbone = Backbone(cfg, rng)
    backbone.store.freeze()
    perception = PerceptionNet(cfg, rng)
    pool = _calibration_pool(cfg)
    _calibrate_perception(backbone, perception, cfg, pool)
    perception.store.freeze()
    task = create_task_net(cfg, cfg.world_seed, pool)
    return ToyWorld(cfg, backbone, perception, task)


def save_world(path: str, world: ToyWorld) -> None:
    arrays = {}
    for prefix, store in (("backbone/", world.backbone.store),
                          ("perception/", world.perception.store),
                          ("task/", world.task.store)):
        for name, t in store.items():
            arrays[prefix + name] = t.data
    tensorio.write_tensors(path, arrays, config_hash=world.cfg.config_hash())


def load_world(cfg: ExperimentConfig, path: str) -> ToyWorld:
    arrays, chash, _, _ = tensorio.read_tensors(path)
    if chash != cfg.config_hash():
        raise StateError(f"world file hash {chash:#010x} != config hash {cfg.config_hash():#010x}")
    rng = np.random.default_rng(derive_seed(cfg.world_seed, "world-init"))
    backbone = Backbone(cfg, rng)
    perception = PerceptionNet(cfg, rng)
    task = TaskNet(cfg, cfg.world_seed)
    for prefix, store in (("backbone/", backbone.store),
                          ("perception/", perception.store),
                          ("task/", task.store)):
        store.load_arrays({name[len(prefix):]: arr for name, arr in arrays.items()
                           if name.startswith(prefix)})
        store.freeze()
    return ToyWorld(cfg, backbone, perception, task)
