"""Bit-exact range coding of integer symbols under quantized CDF tables,
plus bitstream framing.

The coder is a carry-less 32-bit range coder with 8-bit renormalization.
Intervals subdivide multiplicatively: symbol s in a table with cumulative
counts cdf (totaling 2^16) claims [low + (range*cdf[s])>>16,
low + (range*cdf[s+1])>>16), which tiles the current interval exactly, so
the only rate overhead is renormalization clamping and the 4-byte flush.
Carries are never propagated; instead, when the interval straddles a
top-byte boundary with fewer than 2^16 states left, the range is clamped
to the distance to the next 2^16 boundary, which settles the top byte.

Symbols outside a channel's table range are coded as the table's escape
slot (always the last slot) followed by the raw 16-bit value biased by
+32768, sent as two uniformly coded bytes.
"""

from __future__ import annotations

import struct
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from .entropy import TABLE_TOTAL

__all__ = [
    "RangeEncoder", "RangeDecoder", "CdfTableSet", "BitstreamHeader",
    "FramingError", "TruncatedStreamError", "range_encode", "range_decode",
    "table_cost_bits", "pack", "unpack",
    "MAGIC", "BITSTREAM_VERSION", "HEADER_FMT", "HEADER_SIZE", "RAW_BIAS",
]

MASK32 = (1 << 32) - 1
TOP = 1 << 24
BOT = 1 << 16
SHIFT = 16            # log2(TABLE_TOTAL)
RAW_BIAS = 1 << 15    # escape bypass sends value + RAW_BIAS as u16

MAGIC = b"QRC1"
BITSTREAM_VERSION = 1
HEADER_FMT = "<4sBBHHHHHI"  # magic, version, profile, W, H, C, h, w, payload len
HEADER_SIZE = struct.calcsize(HEADER_FMT)


class FramingError(ValueError):
    """Malformed bitstream container (magic, version, or length)."""


class TruncatedStreamError(FramingError):
    """Range-coded payload ended before all symbols were recovered."""


class RangeEncoder:
    """Streaming encoder; feed (cumulative, frequency) pairs, then finish()."""

    def __init__(self):
        self._low = 0
        self._range = MASK32
        self._out = bytearray()

    def encode_interval(self, cum: int, freq: int):
        r = self._range
        lo_off = (r * cum) >> SHIFT
        self._low = (self._low + lo_off) & MASK32
        self._range = ((r * (cum + freq)) >> SHIFT) - lo_off
        self._normalize()

    def _normalize(self):
        low, rng = self._low, self._range
        while True:
            if low ^ ((low + rng) & MASK32) < TOP:
                pass  # top byte settled, emit it
            elif rng < BOT:
                rng = (-low) & (BOT - 1)  # clamp below next 2^16 boundary
            else:
                break
            self._out.append(low >> 24)
            low = (low << 8) & MASK32
            rng = (rng << 8) & MASK32
        self._low, self._range = low, rng

    def finish(self) -> bytes:
        low = self._low
        for _ in range(4):
            self._out.append(low >> 24)
            low = (low << 8) & MASK32
        return bytes(self._out)


class RangeDecoder:
    """Mirror of RangeEncoder over a finished byte stream."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._low = 0
        self._range = MASK32
        self._code = 0
        for _ in range(4):
            self._code = ((self._code << 8) | self._next_byte()) & MASK32

    @property
    def consumed(self) -> int:
        return self._pos

    def _next_byte(self) -> int:
        if self._pos >= len(self._data):
            raise TruncatedStreamError(
                f"range stream exhausted at byte {self._pos}")
        b = self._data[self._pos]
        self._pos += 1
        return b

    def peek_freq(self) -> int:
        """Cumulative-count coordinate of the pending symbol, in [0, 2^16)."""
        d = (self._code - self._low) & MASK32
        return (((d + 1) << SHIFT) - 1) // self._range

    def consume_interval(self, cum: int, freq: int):
        r = self._range
        lo_off = (r * cum) >> SHIFT
        self._low = (self._low + lo_off) & MASK32
        self._range = ((r * (cum + freq)) >> SHIFT) - lo_off
        low, rng = self._low, self._range
        while True:
            if low ^ ((low + rng) & MASK32) < TOP:
                pass
            elif rng < BOT:
                rng = (-low) & (BOT - 1)
            else:
                break
            self._code = ((self._code << 8) | self._next_byte()) & MASK32
            low = (low << 8) & MASK32
            rng = (rng << 8) & MASK32
        self._low, self._range = low, rng


@dataclass
class CdfTableSet:
    """Per-channel quantized CDF tables plus each channel's lowest symbol.

    Table c covers integer symbols lows[c] .. lows[c] + (len-3), with the
    final slot reserved for escape.  Every table starts at 0, ends at 2^16,
    and is strictly increasing.
    """

    tables: list[np.ndarray]
    lows: list[int]

    def __post_init__(self):
        if len(self.tables) != len(self.lows):
            raise ValueError("one low offset required per table")
        self._lists = []
        for i, t in enumerate(self.tables):
            t = np.asarray(t, dtype=np.int64)
            if t.ndim != 1 or t.size < 3:
                raise ValueError(f"table {i}: need >= 1 symbol plus escape")
            if t[0] != 0 or t[-1] != TABLE_TOTAL:
                raise ValueError(f"table {i}: must span [0, {TABLE_TOTAL}]")
            if np.any(np.diff(t) < 1):
                raise ValueError(f"table {i}: counts must all be >= 1")
            self.tables[i] = t
            self._lists.append(t.tolist())

    @classmethod
    def from_model(cls, model) -> "CdfTableSet":
        tables = [model.quantized_cdf_table(c) for c in range(model.channels)]
        lows = [model.symbol_range(c)[0] for c in range(model.channels)]
        return cls(tables, lows)

    def n_regular(self, channel: int) -> int:
        return len(self._lists[channel]) - 2


def range_encode(symbols, channels, tables: CdfTableSet) -> bytes:
    """Code integer symbols (one table channel each) into bytes."""
    symbols = np.asarray(symbols, dtype=np.int64)
    channels = np.asarray(channels, dtype=np.int64)
    if symbols.shape != channels.shape or symbols.ndim != 1:
        raise ValueError("symbols and channels must be equal-length 1-D")
    if symbols.size and not (0 <= channels.min() and
                             channels.max() < len(tables.tables)):
        raise ValueError("symbol channel without a table")
    enc = RangeEncoder()
    for k, c in zip(symbols.tolist(), channels.tolist()):
        cdf = tables._lists[c]
        slot = k - tables.lows[c]
        n_reg = len(cdf) - 2
        if 0 <= slot < n_reg:
            enc.encode_interval(cdf[slot], cdf[slot + 1] - cdf[slot])
        else:
            v = k + RAW_BIAS
            if not 0 <= v <= 0xFFFF:
                raise ValueError(f"symbol {k} outside escape range "
                                 f"[-{RAW_BIAS}, {RAW_BIAS - 1}]")
            enc.encode_interval(cdf[n_reg], cdf[n_reg + 1] - cdf[n_reg])
            enc.encode_interval((v >> 8) << 8, 1 << 8)
            enc.encode_interval((v & 0xFF) << 8, 1 << 8)
    return enc.finish()


def range_decode(data: bytes, channels, tables: CdfTableSet) -> np.ndarray:
    """Recover the symbol sequence; channels drive table selection."""
    channels = np.asarray(channels, dtype=np.int64)
    if channels.ndim != 1:
        raise ValueError("channels must be 1-D")
    if channels.size and not (0 <= channels.min() and
                              channels.max() < len(tables.tables)):
        raise ValueError("symbol channel without a table")
    dec = RangeDecoder(data)
    out = np.empty(channels.size, dtype=np.int64)
    for i, c in enumerate(channels.tolist()):
        cdf = tables._lists[c]
        n_reg = len(cdf) - 2
        slot = bisect_right(cdf, dec.peek_freq()) - 1
        dec.consume_interval(cdf[slot], cdf[slot + 1] - cdf[slot])
        if slot == n_reg:  # escape: two raw bytes follow
            hi = dec.peek_freq() >> 8
            dec.consume_interval(hi << 8, 1 << 8)
            lo = dec.peek_freq() >> 8
            dec.consume_interval(lo << 8, 1 << 8)
            out[i] = ((hi << 8) | lo) - RAW_BIAS
        else:
            out[i] = slot + tables.lows[c]
    return out


def table_cost_bits(symbols, channels, tables: CdfTableSet) -> float:
    """Ideal bits under the quantized tables (escapes cost their slot + 16)."""
    total = 0.0
    for k, c in zip(np.asarray(symbols, dtype=np.int64).tolist(),
                    np.asarray(channels, dtype=np.int64).tolist()):
        cdf = tables._lists[c]
        slot = k - tables.lows[c]
        n_reg = len(cdf) - 2
        if not 0 <= slot < n_reg:
            slot = n_reg
            total += 16.0
        total += -np.log2((cdf[slot + 1] - cdf[slot]) / TABLE_TOTAL)
    return total


@dataclass
class BitstreamHeader:
    profile_id: int
    width: int
    height: int
    channels: int
    latent_h: int
    latent_w: int


def pack(header: BitstreamHeader, payload: bytes) -> bytes:
    head = struct.pack(HEADER_FMT, MAGIC, BITSTREAM_VERSION, header.profile_id,
                       header.width, header.height, header.channels,
                       header.latent_h, header.latent_w, len(payload))
    return head + payload


def unpack(data: bytes) -> tuple[BitstreamHeader, bytes]:
    if len(data) < HEADER_SIZE:
        raise FramingError(f"bitstream shorter than header "
                           f"({len(data)} < {HEADER_SIZE} bytes)")
    magic, version, profile_id, w, h, c, lh, lw, plen = \
        struct.unpack_from(HEADER_FMT, data)
    if magic != MAGIC:
        raise FramingError(f"bad magic {magic!r}")
    if version != BITSTREAM_VERSION:
        raise FramingError(f"unsupported bitstream version {version}")
    if len(data) != HEADER_SIZE + plen:
        raise FramingError(f"payload length field says {plen} bytes, "
                           f"stream carries {len(data) - HEADER_SIZE}")
    header = BitstreamHeader(profile_id, w, h, c, lh, lw)
    return header, data[HEADER_SIZE:]
