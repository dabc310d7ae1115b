"""Framed bitstream container.

Layout (little-endian):

    header (24 bytes): magic "VFCS" | version u16 | frame_count u32
                       | width u32 | height u32 | config_hash u32 | reserved u16
    payload: per frame -> frame_type u8 | substream_count u8
                          | per substream: length u32 | bytes
    trailer: crc32(payload) u32

Rate accounting counts substream bytes only; the container framing (header,
length prefixes, CRC) is not part of the reported rate, mirroring how the
latent bitrates are defined.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import zlib

from ..errors import BitstreamError

MAGIC = b"VFCS"
VERSION = 1
HEADER_LEN = 24

FRAME_I = 0
FRAME_P = 1

# P-frame substream order
SUB_MOTION_HYPER = 0
SUB_MOTION = 1
SUB_RESIDUAL_HYPER = 2
SUB_RESIDUAL = 3
P_SUBSTREAM_NAMES = ("motion_hyper", "motion", "residual_hyper", "residual")


@dataclass(frozen=True)
class FrameRecord:
    frame_type: int                 # FRAME_I or FRAME_P
    substreams: tuple

    def __post_init__(self):
        if self.frame_type not in (FRAME_I, FRAME_P):
            raise BitstreamError(f"unknown frame type {self.frame_type}")
        want = 1 if self.frame_type == FRAME_I else 4
        if len(self.substreams) != want:
            raise BitstreamError(
                f"frame type {self.frame_type} needs {want} substreams, got {len(self.substreams)}")

    @property
    def payload_bytes(self) -> int:
        return sum(len(s) for s in self.substreams)


def payload_bytes(records) -> int:
    return sum(r.payload_bytes for r in records)


def serialize(records, width: int, height: int, config_hash: int) -> bytes:
    header = MAGIC + struct.pack("<HIIIIH", VERSION, len(records), width, height,
                                 config_hash & 0xFFFFFFFF, 0)
    assert len(header) == HEADER_LEN
    body = bytearray()
    for rec in records:
        body.append(rec.frame_type)
        body.append(len(rec.substreams))
        for sub in rec.substreams:
            body.extend(struct.pack("<I", len(sub)))
            body.extend(sub)
    return header + bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))


def parse(blob: bytes):
    """Returns (records, info dict). Any corruption raises BitstreamError."""
    if len(blob) < HEADER_LEN + 4:
        raise BitstreamError("stream shorter than header + trailer")
    if blob[:4] != MAGIC:
        raise BitstreamError(f"bad magic {blob[:4]!r}")
    version, frame_count, width, height, config_hash, _ = struct.unpack_from("<HIIIIH", blob, 4)
    if version != VERSION:
        raise BitstreamError(f"unsupported bitstream version {version}")
    body = blob[HEADER_LEN:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(body) != crc:
        raise BitstreamError("payload CRC mismatch")

    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(body):
            raise BitstreamError(f"stream truncated reading {what}")
        out = body[pos:pos + n]
        pos += n
        return out

    records = []
    for idx in range(frame_count):
        frame_type = take(1, f"frame {idx} type")[0]
        n_sub = take(1, f"frame {idx} substream count")[0]
        subs = []
        for k in range(n_sub):
            (length,) = struct.unpack("<I", take(4, f"frame {idx} substream {k} length"))
            subs.append(bytes(take(length, f"frame {idx} substream {k}")))
        records.append(FrameRecord(frame_type, tuple(subs)))
    if pos != len(body):
        raise BitstreamError(f"{len(body) - pos} unparsed payload bytes")
    info = {"width": width, "height": height, "config_hash": config_hash,
            "frame_count": frame_count}
    return records, info
