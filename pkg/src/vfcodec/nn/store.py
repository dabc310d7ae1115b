"""Named parameter storage with Adam updates.

A ParameterStore is single-writer: one training loop owns it. Forward passes
read the parameter tensors directly, so updated values are visible to the
next graph without rebuilding modules.
"""

from __future__ import annotations

import hashlib

import numpy as np

from ..errors import ShapeError, StateError
from .tensor import Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ParameterStore:
    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self._adam_m: dict[str, np.ndarray] = {}
        self._adam_v: dict[str, np.ndarray] = {}
        self._adam_t = 0
        self.trainable = True

    def register(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise StateError(f"parameter {name!r} already registered")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=self.trainable)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def freeze(self) -> None:
        """Mark every parameter non-trainable (frozen networks)."""
        self.trainable = False
        for t in self._params.values():
            t.requires_grad = False

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def param_count(self, prefix: str = "") -> int:
        return sum(t.data.size for n, t in self._params.items() if n.startswith(prefix))

    def checksum(self, prefix: str = "") -> str:
        """SHA-256 over parameter bytes in name order; detects any drift."""
        digest = hashlib.sha256()
        for name in sorted(self._params):
            if not name.startswith(prefix):
                continue
            t = self._params[name]
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(t.data, dtype=np.float32).tobytes())
        return digest.hexdigest()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ShapeError(
                f"parameter set mismatch: missing={sorted(missing)[:4]} extra={sorted(extra)[:4]}"
            )
        for name, arr in arrays.items():
            t = self._params[name]
            if tuple(arr.shape) != t.data.shape:
                raise ShapeError(f"parameter {name!r}: shape {arr.shape} != {t.data.shape}")
            t.data = np.asarray(arr, dtype=self.dtype)
        self._adam_m.clear()
        self._adam_v.clear()
        self._adam_t = 0


def adam_step(store: ParameterStore, learning_rate: float) -> None:
    """One Adam update over every parameter; gradients are cleared after.

    Raises StateError when any parameter is missing its gradient.
    """
    for name, t in store.items():
        if t.grad is None:
            raise StateError(f"parameter {name!r} has no gradient")
        if t.grad.shape != t.data.shape:
            raise ShapeError(f"gradient shape {t.grad.shape} != parameter shape {t.data.shape}")
    store._adam_t += 1
    step = store._adam_t
    bias1 = 1.0 - ADAM_BETA1 ** step
    bias2 = 1.0 - ADAM_BETA2 ** step
    for name, t in store.items():
        g = t.grad.astype(np.float64)
        m = store._adam_m.get(name)
        v = store._adam_v.get(name)
        if m is None:
            m = np.zeros(t.data.shape, dtype=np.float64)
            v = np.zeros(t.data.shape, dtype=np.float64)
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
        store._adam_m[name] = m
        store._adam_v[name] = v
        update = learning_rate * (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
        t.data = (t.data.astype(np.float64) - update).astype(store.dtype)
        t.grad = None
