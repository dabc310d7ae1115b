"""Versioned binary container for named float32 tensors.

Layout (little-endian):

    magic "TVFC" | version u16 | payload | crc32(payload) u32

    payload = config_hash u32 | stage u16 | step u32
            | meta_len u32 | meta (UTF-8 JSON)
            | count u32
            | count * (name_len u16 | name | ndim u8 | ndim * dim u32 | float32 data)

Checkpoints, dataset frame tensors, and FST parameter files all share this
container; the stage/step cursor and metadata are zero/empty where unused.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib

import numpy as np

from ..errors import BitstreamError

MAGIC = b"TVFC"
VERSION = 1


def pack_tensors(arrays: dict[str, np.ndarray], config_hash: int = 0,
                 meta: dict | None = None, stage: int = 0, step: int = 0) -> bytes:
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(struct.pack("<IHI", config_hash & 0xFFFFFFFF, stage, step))
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        name_b = name.encode()
        if len(name_b) > 0xFFFF:
            raise BitstreamError(f"tensor name too long: {name[:32]}...")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.tobytes())
    payload = buf.getvalue()
    return MAGIC + struct.pack("<H", VERSION) + payload + struct.pack("<I", zlib.crc32(payload))


def unpack_tensors(blob: bytes):
    """Returns (arrays, config_hash, meta, (stage, step))."""
    if len(blob) < 10:
        raise BitstreamError("container truncated before header")
    if blob[:4] != MAGIC:
        raise BitstreamError(f"bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise BitstreamError(f"unsupported container version {version}")
    payload = blob[6:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) != crc:
        raise BitstreamError("container CRC mismatch")

    view = memoryview(payload)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise BitstreamError(f"container truncated reading {what}")
        out = view[pos:pos + n]
        pos += n
        return out

    config_hash, stage, step = struct.unpack("<IHI", take(10, "cursor"))
    (meta_len,) = struct.unpack("<I", take(4, "meta length"))
    meta = json.loads(bytes(take(meta_len, "metadata")).decode() or "{}")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode()
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = tuple(struct.unpack("<I", take(4, "dim"))[0] for _ in range(ndim))
        n_elems = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(4 * n_elems, f"data of {name!r}"), dtype="<f4")
        arrays[name] = data.reshape(shape).copy()
    if pos != len(view):
        raise BitstreamError(f"{len(view) - pos} trailing bytes in container")
    return arrays, config_hash, meta, (stage, step)


def atomic_write(path: str, blob: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def write_tensors(path, arrays, config_hash: int = 0, meta=None, stage: int = 0, step: int = 0) -> None:
    atomic_write(str(path), pack_tensors(arrays, config_hash, meta, stage, step))


def read_tensors(path):
    with open(path, "rb") as fh:
        return unpack_tensors(fh.read())
