"""Bit-exact integer range coder over 16-bit quantized cumulative tables.

A 32-bit carry-less byte-wise range coder: renormalization emits the top
byte whenever it is settled (big-endian output order), and a 4-byte flush
terminates every stream. The hot path is pure integer arithmetic, so
payloads are identical across platforms.
"""

from __future__ import annotations

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
_MASK = (1 << 32) - 1
_TOP = 1 << 24
_BOTTOM = 1 << 16


class CdfError(ValueError):
    """Raised for invalid pmf/cdf inputs."""


class SymbolRangeError(ValueError):
    """Raised when a symbol does not index its cdf."""


class TruncatedPayloadError(ValueError):
    """Raised when a payload ends before all symbols are decoded."""

    def __init__(self, byte_offset: int):
        super().__init__(f"payload exhausted at byte offset {byte_offset}")
        self.byte_offset = byte_offset


def build_cdf(pmf, precision: int = PRECISION) -> np.ndarray:
    """Quantize a probability vector to integer cumulative counts.

    Largest-remainder rounding; every symbol keeps at least one count and
    the counts total exactly 2**precision. Returns int64 array of length
    len(pmf)+1 with cdf[0] == 0.
    """
    p = np.asarray(pmf, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise CdfError(f"pmf must be a non-empty vector, got shape {p.shape}")
    if np.any(p < 2.0 ** -15):
        raise CdfError("zero or sub-floor probability symbol; floor the pmf upstream")
    total_prob = float(p.sum())
    if abs(total_prob - 1.0) > 2.0 ** -12:
        raise CdfError(f"pmf sums to {total_prob}, expected 1 within 2^-12")
    total = 1 << precision
    scaled = p * (total / total_prob)
    counts = np.floor(scaled).astype(np.int64)
    counts = np.maximum(counts, 1)
    excess = int(counts.sum()) - total
    if excess > 0:
        # trim from the largest counts, one at a time (deterministic order)
        order = np.argsort(-counts, kind="stable")
        i = 0
        while excess > 0:
            j = order[i % counts.size]
            if counts[j] > 1:
                counts[j] -= 1
                excess -= 1
            i += 1
    elif excess < 0:
        remainders = scaled - np.floor(scaled)
        order = np.argsort(-remainders, kind="stable")
        for i in range(-excess):
            counts[order[i % counts.size]] += 1
    cdf = np.zeros(counts.size + 1, dtype=np.int64)
    np.cumsum(counts, out=cdf[1:])
    return cdf


class _ByteSink:
    __slots__ = ("buf",)

    def __init__(self):
        self.buf = bytearray()

    def put(self, byte: int):
        self.buf.append(byte)


class _ByteSource:
    __slots__ = ("data", "pos", "strict")

    def __init__(self, data: bytes, strict: bool):
        self.data = data
        self.pos = 0
        self.strict = strict

    def get(self) -> int:
        if self.pos >= len(self.data):
            if self.strict:
                raise TruncatedPayloadError(self.pos)
            self.pos += 1
            return 0
        b = self.data[self.pos]
        self.pos += 1
        return b


class RangeEncoder:
    """Sequential encoder; one instance per stream."""

    def __init__(self):
        self._low = 0
        self._range = _MASK
        self._sink = _ByteSink()

    def encode_symbol(self, symbol: int, cdf: np.ndarray):
        n = len(cdf) - 1
        if not 0 <= symbol < n:
            raise SymbolRangeError(f"symbol {symbol} outside cdf with {n} entries")
        c_lo = int(cdf[symbol])
        c_hi = int(cdf[symbol + 1])
        r = self._range >> PRECISION
        self._low += c_lo * r
        self._range = (c_hi - c_lo) * r
        self._normalize()

    def _normalize(self):
        low, rng = self._low, self._range
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOTTOM:
                rng = (-low) & (_BOTTOM - 1)
            else:
                break
            self._sink.put((low >> 24) & 0xFF)
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self._low, self._range = low, rng

    def finish(self) -> bytes:
        low = self._low
        for _ in range(4):
            self._sink.put((low >> 24) & 0xFF)
            low = (low << 8) & _MASK
        return bytes(self._sink.buf)


class RangeDecoder:
    """Sequential decoder; cdf sequence must mirror the encoder's exactly."""

    def __init__(self, payload: bytes, strict: bool = True):
        self._src = _ByteSource(payload, strict)
        self._low = 0
        self._range = _MASK
        self._code = 0
        for _ in range(4):
            self._code = ((self._code << 8) | self._src.get()) & _MASK

    def decode_symbol(self, cdf: np.ndarray) -> int:
        r = self._range >> PRECISION
        target = (self._code - self._low) // r
        # desynchronized streams (corrupt bytes, wrong tables) can push the
        # target outside [0, TOTAL); clamp so decoding always terminates
        if target >= TOTAL:
            target = TOTAL - 1
        elif target < 0:
            target = 0
        symbol = int(np.searchsorted(cdf, target, side="right")) - 1
        if symbol >= len(cdf) - 1:
            symbol = len(cdf) - 2
        elif symbol < 0:
            symbol = 0
        c_lo = int(cdf[symbol])
        c_hi = int(cdf[symbol + 1])
        self._low += c_lo * r
        self._range = (c_hi - c_lo) * r
        self._normalize()
        return symbol

    def _normalize(self):
        low, rng, code = self._low, self._range, self._code
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOTTOM:
                rng = (-low) & (_BOTTOM - 1)
            else:
                break
            code = ((code << 8) | self._src.get()) & _MASK
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self._low, self._range, self._code = low, rng, code

    @property
    def consumed(self) -> int:
        return self._src.pos


def encode(symbols, cdfs) -> bytes:
    """Encode a symbol sequence under per-symbol cdfs; returns the payload."""
    enc = RangeEncoder()
    for pos, (s, cdf) in enumerate(zip(symbols, cdfs)):
        try:
            enc.encode_symbol(int(s), cdf)
        except SymbolRangeError as e:
            raise SymbolRangeError(f"at position {pos}: {e}") from None
    return enc.finish()


def decode(payload: bytes, cdfs, strict: bool = True) -> list[int]:
    """Exact inverse of :func:`encode` for the same cdf sequence."""
    dec = RangeDecoder(payload, strict=strict)
    return [dec.decode_symbol(cdf) for cdf in cdfs]
