"""Static-model range coder with 16-bit frequency precision.

State is a 64-bit ``low``/``range`` pair renormalized 16 bits at a time; carries
are propagated into the already emitted words.  Symbols outside a table's
support are sent as an escape symbol followed by a raw 32-bit value.
"""

from __future__ import annotations

import struct
import zlib
from bisect import bisect_right
from dataclasses import dataclass
from typing import Sequence

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
MAX_SUPPORT = 1 << 15

_MASK64 = (1 << 64) - 1
_RENORM = 1 << 48
_WORD = 0xFFFF

RAW_MIN, RAW_MAX = -(1 << 31), (1 << 31) - 1


class CorruptStreamError(ValueError):
    """The payload cannot be decoded with the given tables."""


@dataclass
class CdfTable:
    """Frozen frequency tables, one row per distinct context.

    ``cum`` has shape ``[rows, K + 1]`` (``K`` coded symbols, the last of which
    is the escape bucket when ``escape`` is set); ``cum[:, -1] == TOTAL``.
    Symbol ``j`` in row ``r`` corresponds to the integer ``kmin + j``.
    """

    cum: np.ndarray
    kmin: int
    escape: bool = True

    @property
    def rows(self) -> int:
        return self.cum.shape[0]

    @property
    def kmax(self) -> int:
        n = self.cum.shape[1] - 1 - (1 if self.escape else 0)
        return self.kmin + n - 1

    @property
    def freq(self) -> np.ndarray:
        return np.diff(self.cum, axis=1)

    def entropy_bits(self, row: int = 0) -> float:
        p = self.freq[row] / TOTAL
        return float(-(p * np.log2(p)).sum())

    def cost_bits(self, symbols: np.ndarray, index: np.ndarray | None = None) -> float:
        """Ideal code length of ``symbols`` under the frozen tables (escapes included)."""
        symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
        index = _index_for(self, symbols, index)
        j, esc = _symbol_slots(self, symbols)
        freq = self.cum[index, j + 1] - self.cum[index, j]
        return float(-np.log2(freq / TOTAL).sum() + 32.0 * esc.sum())


def freeze_pmf(pmf: np.ndarray, kmin: int, escape: bool = True) -> CdfTable:
    """Quantize probability rows ``[..., K]`` over ``kmin..kmin+K-1`` to a table.

    Each symbol gets ``max(1, round(P * 2^16))`` counts, totals are fixed up by
    largest remainder, and the escape bucket receives the tail mass.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.ndim == 1:
        pmf = pmf[None]
    pmf = pmf.reshape(-1, pmf.shape[-1])
    k = pmf.shape[1]
    if k > MAX_SUPPORT:
        raise ValueError(f"support of {k} symbols exceeds {MAX_SUPPORT}")
    if not np.isfinite(pmf).all():
        raise ValueError("pmf has non-finite entries")
    pmf = np.clip(pmf, 0.0, None)
    if escape:
        tail = np.clip(1.0 - pmf.sum(axis=1, keepdims=True), 0.0, None)
        pmf = np.concatenate([pmf, tail], axis=1)
    total = pmf.sum(axis=1, keepdims=True)
    total[total == 0] = 1.0
    raw = pmf / total * TOTAL
    base = np.maximum(1, np.floor(raw)).astype(np.int64)
    deficit = TOTAL - base.sum(axis=1)

    # hand out missing counts to the largest remainders (ties by symbol order)
    rem = raw - np.floor(raw)
    rem[np.floor(raw) < 1] = -1.0  # floored-up entries already got extra mass
    order = np.argsort(-rem, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(base.shape[1])[None].repeat(base.shape[0], 0), axis=1)
    pos = deficit > 0
    if pos.any():
        base[pos] += (ranks[pos] < deficit[pos, None]).astype(np.int64)

    # surplus from the floor rule comes out of the largest entries
    neg = np.nonzero(deficit < 0)[0]
    if neg.size:
        jmax = np.argmax(base[neg], axis=1)
        take = np.minimum(-deficit[neg], base[neg, jmax] - 1)
        base[neg, jmax] -= take
        deficit[neg] += take
    rows = np.nonzero(deficit < 0)[0]
    for r in rows:
        need = -int(deficit[r])
        while need:
            j = int(np.argmax(base[r]))
            take = min(need, int(base[r, j]) - 1)
            if take <= 0:
                raise ValueError("cannot fit table into 16-bit precision")
            base[r, j] -= take
            need -= take

    cum = np.zeros((base.shape[0], base.shape[1] + 1), dtype=np.int64)
    np.cumsum(base, axis=1, out=cum[:, 1:])
    assert (cum[:, -1] == TOTAL).all()
    return CdfTable(cum=cum, kmin=int(kmin), escape=escape)


def _index_for(table: CdfTable, symbols: np.ndarray, index: np.ndarray | None) -> np.ndarray:
    if index is None:
        if table.rows == 1:
            return np.zeros(symbols.shape[0], dtype=np.int64)
        if table.rows != symbols.shape[0]:
            raise ValueError("need one table row per symbol or an explicit index")
        return np.arange(symbols.shape[0], dtype=np.int64)
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if index.shape[0] != symbols.shape[0]:
        raise ValueError("index length must match symbol count")
    return index


def _symbol_slots(table: CdfTable, symbols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    j = symbols - table.kmin
    n_sym = table.cum.shape[1] - 1
    n_direct = n_sym - 1 if table.escape else n_sym
    esc = (j < 0) | (j >= n_direct)
    if esc.any() and not table.escape:
        raise ValueError("symbol outside support and table has no escape bucket")
    j = np.where(esc, n_sym - 1, j)
    return j, esc


class RangeEncoder:
    def __init__(self) -> None:
        self.low = 0
        self.range = _MASK64
        self.words: list[int] = []

    def _encode(self, start: int, freq: int) -> None:
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * freq
        if self.low > _MASK64:
            self.low &= _MASK64
            words = self.words
            i = len(words) - 1
            while words[i] == _WORD:
                words[i] = 0
                i -= 1
            words[i] += 1
        while self.range < _RENORM:
            self.words.append(self.low >> 48)
            self.low = (self.low << 16) & _MASK64
            self.range <<= 16

    def encode_raw32(self, value: int) -> None:
        u = value & 0xFFFFFFFF
        self._encode(u >> 16, 1)
        self._encode(u & _WORD, 1)

    def finish(self) -> bytes:
        low = self.low
        for shift in (48, 32, 16, 0):
            self.words.append((low >> shift) & _WORD)
        return struct.pack(f">{len(self.words)}H", *self.words)


class RangeDecoder:
    def __init__(self, payload: bytes) -> None:
        if len(payload) % 2 or len(payload) < 8:
            raise CorruptStreamError("payload length is not a valid coder output")
        self.words = struct.unpack(f">{len(payload) // 2}H", payload)
        self.pos = 4
        w = self.words
        self.code = (w[0] << 48) | (w[1] << 32) | (w[2] << 16) | w[3]
        self.range = _MASK64

    def _target(self) -> int:
        self._r = self.range >> PRECISION
        cf = self.code // self._r
        if cf >= TOTAL:
            raise CorruptStreamError("code value outside the coding interval")
        return cf

    def _consume(self, start: int, freq: int) -> None:
        self.code -= self._r * start
        self.range = self._r * freq
        while self.range < _RENORM:
            if self.pos >= len(self.words):
                raise CorruptStreamError("payload truncated")
            self.code = (self.code << 16) | self.words[self.pos]
            self.pos += 1
            self.range <<= 16
        if self.code >= self.range:
            raise CorruptStreamError("decoder state out of range")

    def decode_raw32(self) -> int:
        hi = self._target()
        self._consume(hi, 1)
        lo = self._target()
        self._consume(lo, 1)
        u = (hi << 16) | lo
        return u - (1 << 32) if u >= 1 << 31 else u

    def finish(self) -> None:
        if self.pos != len(self.words):
            raise CorruptStreamError("trailing data after the last symbol")


def encode(symbols: Sequence[int] | np.ndarray, table: CdfTable, index: np.ndarray | None = None) -> bytes:
    """Range-code integer ``symbols``; row ``index[i]`` of ``table`` codes symbol ``i``."""
    enc = RangeEncoder()
    encode_into(enc, symbols, table, index)
    return enc.finish()


def encode_into(enc: RangeEncoder, symbols, table: CdfTable, index: np.ndarray | None = None) -> None:
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    if symbols.size == 0:
        return
    index = _index_for(table, symbols, index)
    j, esc = _symbol_slots(table, symbols)
    starts = table.cum[index, j].tolist()
    freqs = (table.cum[index, j + 1] - table.cum[index, j]).tolist()
    esc_l = esc.tolist()
    raw = symbols.tolist()
    if esc.any():
        far = symbols[esc]
        if far.min() < RAW_MIN or far.max() > RAW_MAX:
            raise ValueError("escaped symbol outside the signed 32-bit range")
    code = enc._encode
    for i in range(len(starts)):
        code(starts[i], freqs[i])
        if esc_l[i]:
            enc.encode_raw32(raw[i])


def decode(payload: bytes, table: CdfTable, count: int, index: np.ndarray | None = None) -> np.ndarray:
    dec = RangeDecoder(payload)
    out = decode_from(dec, table, count, index)
    dec.finish()
    return out


def decode_from(dec: RangeDecoder, table: CdfTable, count: int, index: np.ndarray | None = None) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    dummy = np.zeros(count, dtype=np.int64)
    index = _index_for(table, dummy, index).tolist()
    n_sym = table.cum.shape[1] - 1
    esc_slot = n_sym - 1 if table.escape else -1
    kmin = table.kmin
    rows: dict[int, list[int]] = {}
    out = [0] * count
    for i in range(count):
        ri = index[i]
        row = rows.get(ri)
        if row is None:
            row = table.cum[ri].tolist()
            rows[ri] = row
        cf = dec._target()
        j = bisect_right(row, cf) - 1
        dec._consume(row[j], row[j + 1] - row[j])
        if j == esc_slot:
            out[i] = dec.decode_raw32()
        else:
            out[i] = kmin + j
    return np.asarray(out, dtype=np.int64)


# ---------------------------------------------------------------- chunks

CHUNK_HEADER = struct.Struct("<II")


def pack_chunk(payload: bytes) -> bytes:
    return CHUNK_HEADER.pack(len(payload), zlib.crc32(payload) & 0xFFFFFFFF) + payload


def unpack_chunk(data: bytes | memoryview, offset: int = 0) -> tuple[bytes, int]:
    """Return ``(payload, next_offset)``; raises on truncation or CRC mismatch."""
    if offset + CHUNK_HEADER.size > len(data):
        raise CorruptStreamError("chunk header truncated")
    length, crc = CHUNK_HEADER.unpack_from(data, offset)
    start = offset + CHUNK_HEADER.size
    end = start + length
    if end > len(data):
        raise CorruptStreamError("chunk payload truncated")
    payload = bytes(data[start:end])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CorruptStreamError("chunk checksum mismatch")
    return payload, end
