"""Carry-less byte-oriented range coder (32-bit, 16-bit frequency precision).

Symbols are coded against explicit cumulative frequency tables whose totals
must not exceed 2^16. The coder is lossless for any table with all-positive
frequencies; stream length stays within a fraction of a percent of the
cross entropy plus a constant flush cost.
"""

from __future__ import annotations

import numpy as np

from ..errors import CoderError

PRECISION = 32
TOP = 1 << (PRECISION - 8)
BOTTOM = 1 << (PRECISION - 16)
MASK = (1 << PRECISION) - 1
FREQ_TOTAL = 1 << 16


class RangeEncoder:
    def __init__(self):
        self._low = 0
        self._range = MASK
        self._out = bytearray()
        self._count = 0

    def encode(self, cum_lo: int, cum_hi: int, total: int) -> None:
        if not (0 <= cum_lo < cum_hi <= total):
            raise CoderError(f"bad frequency interval [{cum_lo}, {cum_hi}) / {total}")
        if total > BOTTOM:
            raise CoderError(f"pmf total {total} exceeds {BOTTOM}")
        r = self._range // total
        self._low = (self._low + r * cum_lo) & MASK
        self._range = r * (cum_hi - cum_lo)
        self._normalize()
        self._count += 1

    def _normalize(self):
        low, rng, out = self._low, self._range, self._out
        while (low ^ (low + rng)) < TOP or rng < BOTTOM:
            if (low ^ (low + rng)) >= TOP:
                # underflow: clamp range down to the byte boundary
                rng = (MASK + 1 - low) & (BOTTOM - 1)
            out.append((low >> (PRECISION - 8)) & 0xFF)
            low = (low << 8) & MASK
            rng = (rng << 8) & MASK
        self._low, self._range = low, rng

    def finish(self) -> bytes:
        if self._count == 0:
            return b""
        low = self._low
        for _ in range(PRECISION // 8):
            self._out.append((low >> (PRECISION - 8)) & 0xFF)
            low = (low << 8) & MASK
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data: bytes, empty: bool = False):
        self._data = data
        self._pos = 0
        self._low = 0
        self._range = MASK
        self._code = 0
        if not empty:
            for _ in range(PRECISION // 8):
                self._code = (self._code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self._pos >= len(self._data):
            raise CoderError("entropy stream truncated")
        b = self._data[self._pos]
        self._pos += 1
        return b

    def decode(self, cum: np.ndarray, total: int) -> int:
        """cum: cumulative frequency array of length K+1 with cum[0]=0, cum[K]=total."""
        r = self._range // total
        offset = (self._code - self._low) & MASK
        target = offset // r
        if target >= total:
            target = total - 1
        sym = int(np.searchsorted(cum, target, side="right")) - 1
        if sym < 0 or sym >= len(cum) - 1:
            raise CoderError("corrupt stream: no symbol matches decoder state")
        cum_lo, cum_hi = int(cum[sym]), int(cum[sym + 1])
        if cum_hi <= cum_lo:
            raise CoderError("corrupt stream: empty frequency bin selected")
        self._low = (self._low + r * cum_lo) & MASK
        self._range = r * (cum_hi - cum_lo)
        self._normalize()
        return sym

    def _normalize(self):
        low, rng = self._low, self._range
        while (low ^ (low + rng)) < TOP or rng < BOTTOM:
            if (low ^ (low + rng)) >= TOP:
                rng = (MASK + 1 - low) & (BOTTOM - 1)
            self._code = ((self._code << 8) | self._next_byte()) & MASK
            low = (low << 8) & MASK
            rng = (rng << 8) & MASK
        self._low, self._range = low, rng


def encode_with_tables(symbols, cum_rows: np.ndarray) -> bytes:
    """Encode symbols[i] against cumulative table cum_rows[i] (each totals 2^16)."""
    enc = RangeEncoder()
    for i, s in enumerate(symbols):
        row = cum_rows[i]
        if s < 0 or s >= len(row) - 1:
            raise CoderError(f"symbol {s} outside pmf support of width {len(row) - 1}")
        lo, hi = int(row[s]), int(row[s + 1])
        if hi <= lo:
            raise CoderError(f"symbol {s} has zero frequency")
        enc.encode(lo, hi, int(row[-1]))
    return enc.finish()


def decode_with_tables(data: bytes, cum_rows: np.ndarray, count: int):
    if count == 0:
        return []
    dec = RangeDecoder(data)
    return [dec.decode(cum_rows[i], int(cum_rows[i][-1])) for i in range(count)]


def quantize_pmf(probs: np.ndarray, total: int = FREQ_TOTAL) -> np.ndarray:
    """Rows of probabilities -> integer frequencies, each >= 1, summing to total.

    Deterministic: floor allocation with the remainder assigned to each row's
    largest bin.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    n, k = probs.shape
    if k > total // 2:
        raise CoderError(f"pmf support {k} too wide for total {total}")
    p = np.maximum(probs, 0.0)
    norm = p.sum(axis=1, keepdims=True)
    uniform = np.full((1, k), 1.0 / k)
    p = np.where(norm > 0, p / np.where(norm > 0, norm, 1.0), uniform)
    freqs = np.floor(p * (total - k)).astype(np.int64) + 1
    deficit = total - freqs.sum(axis=1)
    freqs[np.arange(n), np.argmax(freqs, axis=1)] += deficit
    return freqs


def cumulative_rows(freqs: np.ndarray) -> np.ndarray:
    freqs = np.atleast_2d(freqs)
    n = freqs.shape[0]
    return np.concatenate([np.zeros((n, 1), dtype=np.int64),
                           np.cumsum(freqs, axis=1)], axis=1)


# ---------------------------------------------------------------------------
# adaptive order-0 byte model (lossless I-frame payloads)

_ADAPT_INCREMENT = 24
_ADAPT_LIMIT = FREQ_TOTAL - 256


class _AdaptiveByteModel:
    def __init__(self):
        self.counts = np.ones(256, dtype=np.int64)

    def cum(self):
        c = np.zeros(257, dtype=np.int64)
        np.cumsum(self.counts, out=c[1:])
        return c

    def update(self, sym: int):
        self.counts[sym] += _ADAPT_INCREMENT
        if self.counts.sum() > _ADAPT_LIMIT:
            self.counts = (self.counts + 1) // 2


def encode_bytes_adaptive(payload: bytes) -> bytes:
    if not payload:
        return b""
    model = _AdaptiveByteModel()
    enc = RangeEncoder()
    for b in payload:
        c = model.cum()
        enc.encode(int(c[b]), int(c[b + 1]), int(c[256]))
        model.update(b)
    return enc.finish()


def decode_bytes_adaptive(data: bytes, count: int) -> bytes:
    if count == 0:
        return b""
    model = _AdaptiveByteModel()
    dec = RangeDecoder(data)
    out = bytearray()
    for _ in range(count):
        c = model.cum()
        sym = dec.decode(c, int(c[256]))
        model.update(sym)
        out.append(sym)
    return bytes(out)
