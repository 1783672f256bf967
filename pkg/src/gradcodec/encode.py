"""Prefix-code bitstream for stochastically pruned tensors.

Symbols and code words::

    +0.0          -> 0
    +alpha        -> 100
    -alpha        -> 101
    anything else -> 11 + w-bit IEEE pattern (w = 16 or 32)

Stream file: ``b"ENC1"``, alpha as little-endian f32, ``w`` as u8, element
count as u64, then the packed bits (most significant bit first, final byte
zero padded).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, TruncatedError
from .tensorio import atomic_write

MAGIC = b"ENC1"
_HEADER = struct.Struct("<4sfBQ")
WIDTHS = (16, 32)

ZERO, PLUS, MINUS, RAW = 0, 1, 2, 3
_CODE_LEN = np.array([1, 3, 3, 2], dtype=np.int64)


@dataclass(frozen=True)
class SymbolCounts:
    zeros: int
    alphas: int
    passthrough: int

    @property
    def total(self) -> int:
        return self.zeros + self.alphas + self.passthrough


@dataclass(frozen=True)
class EncodedStream:
    alpha: float
    width: int
    count: int
    bits: bytes
    bit_length: int

    def to_bytes(self) -> bytes:
        return _HEADER.pack(MAGIC, self.alpha, self.width, self.count) + self.bits


def _check_width(w: int) -> None:
    if w not in WIDTHS:
        raise DomainError(f"payload width must be 16 or 32, got {w}")


def _classify(values: np.ndarray, alpha: float) -> np.ndarray:
    pattern = values.view(np.uint32)
    a = np.float32(alpha).view(np.uint32)
    sym = np.full(values.shape, RAW, dtype=np.int8)
    sym[pattern == 0] = ZERO
    sym[pattern == a] = PLUS
    sym[pattern == (a | np.uint32(0x80000000))] = MINUS
    return sym


def symbol_counts(values, alpha: float) -> SymbolCounts:
    sym = _classify(np.asarray(values, dtype=np.float32).reshape(-1), alpha)
    c = np.bincount(sym, minlength=4)
    return SymbolCounts(int(c[ZERO]), int(c[PLUS] + c[MINUS]), int(c[RAW]))


def _payload_words(values: np.ndarray, w: int) -> np.ndarray:
    if w == 32:
        return values.view(np.uint32).astype(np.uint64)
    half = values.astype(np.float16)
    lossy = half.astype(np.float32).view(np.uint32) != values.view(np.uint32)
    if lossy.any():
        i = int(np.flatnonzero(lossy)[0])
        raise DomainError(f"value {values[i]!r} at index {i} is not exactly representable in 16 bits")
    return half.view(np.uint16).astype(np.uint64)


def encode_stream(values, alpha: float, w: int = 32) -> EncodedStream:
    _check_width(w)
    if not alpha > 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    v = np.ascontiguousarray(np.asarray(values, dtype=np.float32).reshape(-1))
    if not np.isfinite(v).all():
        raise DomainError("cannot encode non-finite values")
    sym = _classify(v, alpha)
    lengths = _CODE_LEN[sym] + np.where(sym == RAW, w, 0)
    ends = np.cumsum(lengths)
    total = int(ends[-1]) if v.size else 0
    starts = ends - lengths

    bits = np.zeros(total, dtype=np.uint8)
    bits[starts[sym != ZERO]] = 1
    bits[starts[sym == MINUS] + 2] = 1
    raw = np.flatnonzero(sym == RAW)
    bits[starts[raw] + 1] = 1
    if raw.size:
        words = _payload_words(v[raw], w)
        shifts = np.arange(w - 1, -1, -1, dtype=np.uint64)
        payload = ((words[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)
        bits[(starts[raw] + 2)[:, None] + np.arange(w)] = payload
    return EncodedStream(float(np.float32(alpha)), w, int(v.size), np.packbits(bits).tobytes(), total)


def decode_stream(stream: EncodedStream) -> np.ndarray:
    """Inverse of :func:`encode_stream`; raises on a stream ending mid-codeword."""
    _check_width(stream.width)
    n, w = stream.count, stream.width
    bits = np.unpackbits(np.frombuffer(stream.bits, dtype=np.uint8))
    limit = bits.size
    sym = np.empty(n, dtype=np.int8)
    raw_at = []
    pos = 0
    b = bits.tolist()
    for i in range(n):
        if pos >= limit:
            raise TruncatedError(f"stream ends before element {i} of {n}")
        if b[pos] == 0:
            sym[i] = ZERO
            pos += 1
            continue
        if pos + 1 >= limit:
            raise TruncatedError(f"dangling prefix at element {i}")
        if b[pos + 1] == 1:
            if pos + 2 + w > limit:
                raise TruncatedError(f"passthrough payload cut short at element {i}")
            sym[i] = RAW
            raw_at.append(pos + 2)
            pos += 2 + w
        else:
            if pos + 2 >= limit:
                raise TruncatedError(f"dangling prefix at element {i}")
            sym[i] = MINUS if b[pos + 2] else PLUS
            pos += 3
    if np.any(bits[pos:]):
        raise FormatError("non-zero padding after the last element")

    alpha = np.float32(stream.alpha)
    out = np.zeros(n, dtype=np.float32)
    out[sym == PLUS] = alpha
    out[sym == MINUS] = -alpha
    if raw_at:
        idx = np.asarray(raw_at, dtype=np.int64)[:, None] + np.arange(w)
        weights = np.uint64(1) << np.arange(w - 1, -1, -1, dtype=np.uint64)
        words = (bits[idx].astype(np.uint64) * weights).sum(axis=1, dtype=np.uint64)
        if w == 32:
            vals = words.astype(np.uint32).view(np.float32)
        else:
            vals = words.astype(np.uint16).view(np.float16).astype(np.float32)
        out[sym == RAW] = vals
    return out


def compression_ratio(counts: SymbolCounts, w: int = 32) -> float:
    """Bits per value of the code for the given symbol counts."""
    _check_width(w)
    if min(counts.zeros, counts.alphas, counts.passthrough) < 0:
        raise DomainError("symbol counts must be non-negative")
    if counts.total == 0:
        raise DomainError("compression ratio undefined for an empty tensor")
    return (counts.zeros + 3 * counts.alphas + (2 + w) * counts.passthrough) / counts.total


def stream_from_bytes(data: bytes, source: str = "<bytes>") -> EncodedStream:
    if data[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < _HEADER.size:
        raise TruncatedError(f"{source}: header truncated")
    _, alpha, w, count = _HEADER.unpack_from(data)
    _check_width(w)
    body = data[_HEADER.size:]
    return EncodedStream(float(alpha), int(w), int(count), body, 8 * len(body))


def read_stream(path) -> EncodedStream:
    return stream_from_bytes(Path(path).read_bytes(), str(path))


def write_stream(stream: EncodedStream, path) -> None:
    blob = stream.to_bytes()
    atomic_write(path, lambda fh: fh.write(blob))
