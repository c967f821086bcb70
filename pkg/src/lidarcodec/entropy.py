"""Integer range coder driven by quantised model PMFs.

Payload layout of one chunk: the bytes shifted out of the top of the 32-bit
``low`` register during renormalisation (most significant first, carries
propagated back into already written bytes), followed by the shortest
flush that pins the final interval, with trailing ``0x00`` bytes removed.
The decoder reads ``0x00`` past the end of a chunk, so the stripped bytes
are implied. Chunk boundaries come from the container directory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ValidationError

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 32
_BOT = 1 << 24
_MASK = _TOP - 1


def quantize_pmf(pmf) -> np.ndarray:
    """Integer counts summing to ``2**16`` with every count >= 1.

    Each symbol first gets one count; the remaining ``2**16 - A`` are split
    proportionally by floor, and the leftover units go to the largest
    fractional parts (ties to the lower symbol). Works row-wise on any
    leading shape and is a pure function of the input bits.
    """
    p = np.asarray(pmf, dtype=np.float64)
    A = p.shape[-1]
    if A > TOTAL // 2:
        raise ValidationError(f"alphabet of {A} symbols does not fit a {PRECISION}-bit table")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise NumericError("PMF has negative or non-finite entries")
    s = p.sum(axis=-1, keepdims=True)
    if np.any(s <= 0):
        raise NumericError("PMF sums to zero")
    budget = TOTAL - A
    scaled = p * (budget / s)
    base = np.floor(scaled)
    frac = scaled - base
    counts = base.astype(np.int64) + 1
    rem = np.clip(TOTAL - counts.sum(axis=-1), 0, A)
    order = np.argsort(-frac, axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(A), order.shape), axis=-1)
    counts += rank < rem[..., None]
    return counts


def cumulative(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    cum = np.zeros(counts.shape[:-1] + (counts.shape[-1] + 1,), dtype=np.int64)
    np.cumsum(counts, axis=-1, out=cum[..., 1:])
    return cum


@dataclass(frozen=True)
class FreqTable:
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 1 or np.any(c < 1) or int(c.sum()) != TOTAL:
            raise ValidationError(f"frequency table must be positive counts summing to {TOTAL}")
        object.__setattr__(self, "counts", c)
        object.__setattr__(self, "cum", cumulative(c))

    @classmethod
    def from_pmf(cls, pmf):
        return cls(quantize_pmf(pmf))

    @property
    def total(self):
        return TOTAL

    def bits(self, s) -> float:
        return PRECISION - float(np.log2(self.counts[s]))


class RangeEncoder:
    __slots__ = ("low", "range", "out")

    def __init__(self):
        self.low = 0
        self.range = _MASK
        self.out = bytearray()

    def _carry(self):
        out = self.out
        i = len(out) - 1
        while out[i] == 0xFF:
            out[i] = 0
            i -= 1
        out[i] += 1

    def encode(self, cum_lo: int, freq: int):
        r = self.range >> PRECISION
        self.low += r * cum_lo
        self.range = r * freq
        if self.low >= _TOP:
            self.low -= _TOP
            self._carry()
        while self.range < _BOT:
            self.out.append(self.low >> 24)
            self.low = (self.low << 8) & _MASK
            self.range <<= 8

    def finish(self) -> bytes:
        low, hi = self.low, self.low + self.range
        for k in range(5):
            step = 1 << (32 - 8 * k)
            value = -(-low // step) * step
            if value < hi:
                break
        if value >= _TOP:
            value -= _TOP
            self._carry()
        for j in range(k):
            self.out.append((value >> (24 - 8 * j)) & 0xFF)
        end = len(self.out)
        while end and self.out[end - 1] == 0:
            end -= 1
        return bytes(self.out[:end])


class RangeDecoder:
    __slots__ = ("data", "pos", "code", "range", "_r")

    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0
        self.code = 0
        self.range = _MASK
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        pos = self.pos
        self.pos = pos + 1
        return self.data[pos] if pos < len(self.data) else 0

    def target(self) -> int:
        """Cumulative-frequency slot of the next symbol, in ``[0, 2**16)``."""
        self._r = self.range >> PRECISION
        f = self.code // self._r
        return f if f < TOTAL else TOTAL - 1

    def consume(self, cum_lo: int, freq: int):
        r = self._r
        self.code -= r * cum_lo
        self.range = r * freq
        while self.range < _BOT:
            self.code = ((self.code << 8) | self._next()) & _MASK
            self.range <<= 8

    def decode(self, cum) -> int:
        """Decode one symbol against cumulative table ``cum`` (length ``A + 1``)."""
        f = self.target()
        s = int(np.searchsorted(cum, f, side="right")) - 1
        self.consume(int(cum[s]), int(cum[s + 1] - cum[s]))
        return s


def encode_symbol(state: RangeEncoder, table: FreqTable, s: int) -> RangeEncoder:
    if not 0 <= s < len(table.counts):
        raise ValidationError(f"symbol {s} outside alphabet of {len(table.counts)}")
    state.encode(int(table.cum[s]), int(table.counts[s]))
    return state


def decode_symbol(state: RangeDecoder, table: FreqTable):
    return state.decode(table.cum), state


def encode_stream(tables, symbols) -> bytes:
    enc = RangeEncoder()
    for t, s in zip(tables, symbols):
        encode_symbol(enc, t, int(s))
    return enc.finish()


def decode_stream(data: bytes, tables) -> list:
    dec = RangeDecoder(data)
    return [decode_symbol(dec, t)[0] for t in tables]


def ideal_bits(counts, symbols) -> float:
    """``sum -log2(count/2**16)`` of the coded symbols."""
    counts = np.asarray(counts, dtype=np.float64)
    symbols = np.asarray(symbols, dtype=np.int64)
    c = np.take_along_axis(counts, symbols[..., None], axis=-1)[..., 0]
    return float((PRECISION - np.log2(c)).sum())
