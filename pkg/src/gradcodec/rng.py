"""Counter-based random streams keyed by (seed, stream, element index).

Every draw is a pure function of its key and index, so any slice of a stream
can be regenerated independently and chunked evaluation matches sequential
evaluation bit for bit.  The generator is numpy's Philox4x64; element ``i``
uses raw word ``i % 4`` of counter ``i // 4``.
"""
from __future__ import annotations

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import DomainError

# stream purposes; repetition index is packed above the low byte
PRUNE = 1
NORMAL = 2
SIGN = 3

_MASK64 = (1 << 64) - 1
_TWO_M53 = 2.0 ** -53


def _key(seed: int, stream: int) -> int:
    seed = int(seed)
    if seed < 0 or seed > _MASK64:
        raise DomainError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed | ((int(stream) & _MASK64) << 64)


def stream_id(purpose: int, repetition: int = 0) -> int:
    return purpose | (int(repetition) << 8)


def raw_words(seed: int, stream: int, start: int, count: int) -> np.ndarray:
    """Raw uint64 words ``start .. start+count-1`` of the keyed stream."""
    if count <= 0:
        return np.empty(0, dtype=np.uint64)
    bg = np.random.Philox(key=_key(seed, stream))
    block, lane = divmod(int(start), 4)
    if block:
        bg.advance(block)
    return bg.random_raw(count + lane)[lane:]


def uniforms(seed: int, stream: int, start: int, count: int) -> np.ndarray:
    """Uniform doubles in [0, 1) with 53-bit resolution."""
    w = raw_words(seed, stream, start, count)
    return (w >> np.uint64(11)).astype(np.float64) * _TWO_M53


def open_uniforms(seed: int, stream: int, start: int, count: int) -> np.ndarray:
    """Uniform doubles strictly inside (0, 1); safe for inverse CDFs."""
    w = raw_words(seed, stream, start, count)
    return ((w >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_M53


def normals(seed: int, stream: int, start: int, count: int, upper: float | None = None) -> np.ndarray:
    """Standard normal draws by inversion, optionally conditioned on ``Z <= upper``.

    Conditioning maps the uniform onto ``(0, Phi(upper))``, which has the same
    law as rejecting and redrawing every ``Z > upper`` but keeps one draw per index.
    """
    u = open_uniforms(seed, stream, start, count)
    if upper is not None:
        u = u * ndtr(upper)
    return ndtri(u)


def signs(seed: int, stream: int, start: int, count: int) -> np.ndarray:
    w = raw_words(seed, stream, start, count)
    return np.where((w >> np.uint64(63)) == 1, -1.0, 1.0)
