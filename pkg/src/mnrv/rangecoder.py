"""Static range coder over an empirical symbol-frequency table.

Byte-oriented carry-aware range coding: 32-bit range, renormalized one byte
at a time below 2^24, carries resolved through a cache of pending 0xFF
bytes. The frequency table rides in the payload header, so a payload is
decodable on its own: counts are gathered in one pass, rescaled to a total
of at most 2^16 (never dropping a nonzero count to zero), and stored
sparsely as (symbol, count) pairs with 32-bit counts, little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ContainerError

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
_MAX_TOTAL = 1 << 16


class _Encoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def encode(self, cum: int, freq: int, total: int) -> None:
        r = self.range // total
        self.low += r * cum
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            out_byte = self.cache
            while self.cache_size:
                self.out.append((out_byte + carry) & 0xFF)
                out_byte = 0xFF
                self.cache_size -= 1
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class _Decoder:
    def __init__(self, data: bytes):
        # pad so a valid stream can always feed the register; extra zero
        # bytes never change decoded symbols
        self.data = data + b"\x00" * 8
        self.pos = 1  # first byte is the encoder's leading zero
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self.data[self.pos]
            self.pos += 1

    def decode_target(self, total: int) -> int:
        self._r = self.range // total
        return min(self.code // self._r, total - 1)

    def consume(self, cum: int, freq: int) -> None:
        self.code -= self._r * cum
        self.range = self._r * freq
        while self.range < _TOP:
            self.code = ((self.code << 8) | self.data[self.pos]) & 0xFFFFFFFFFF
            self.pos += 1
            self.range <<= 8


def _rescale(counts: np.ndarray) -> np.ndarray:
    counts = counts.astype(np.uint64)
    while counts.sum() > _MAX_TOTAL:
        counts = np.maximum(counts >> 1, np.where(counts > 0, 1, 0).astype(np.uint64))
    return counts


def encode_symbols(symbols: np.ndarray, bits: int) -> bytes:
    """Pack an array of b-bit symbols into a self-contained payload."""
    symbols = np.asarray(symbols)
    if symbols.ndim != 1:
        raise ValueError(f"expected a flat symbol array, got shape {symbols.shape}")
    if not 1 <= bits <= 16:
        raise ValueError(f"bits must lie in [1,16], got {bits}")
    n = symbols.size
    header = struct.pack("<IB", n, bits)
    if n == 0:
        return header + struct.pack("<I", 0) + struct.pack("<I", 0)
    if symbols.min() < 0 or symbols.max() >= (1 << bits):
        raise ValueError(f"symbols exceed {bits}-bit alphabet")

    raw_counts = np.bincount(symbols.astype(np.int64), minlength=1 << bits)
    counts = _rescale(raw_counts)
    present = np.nonzero(counts)[0]
    table = b"".join(
        struct.pack("<HI", int(s), int(counts[s])) for s in present
    )
    cum = np.zeros(counts.size + 1, dtype=np.uint64)
    np.cumsum(counts, out=cum[1:])
    total = int(cum[-1])

    enc = _Encoder()
    cum_list = cum.tolist()
    count_list = counts.tolist()
    for s in symbols.tolist():
        enc.encode(cum_list[s], count_list[s], total)
    coded = enc.finish()
    return (header + struct.pack("<I", len(present)) + table
            + struct.pack("<I", len(coded)) + coded)


def decode_symbols(payload: bytes) -> tuple[np.ndarray, int]:
    """Recover (symbols, bits) from an encode_symbols payload."""
    try:
        n, bits = struct.unpack_from("<IB", payload, 0)
        off = 5
        (n_entries,) = struct.unpack_from("<I", payload, off)
        off += 4
        entries = struct.unpack_from("<" + "HI" * n_entries, payload, off)
        off += 6 * n_entries
        (coded_len,) = struct.unpack_from("<I", payload, off)
        off += 4
    except struct.error as exc:
        raise ContainerError(f"entropy payload truncated: {exc}") from None
    if off + coded_len > len(payload):
        raise ContainerError(
            f"entropy payload truncated: need {off + coded_len} bytes, have {len(payload)}"
        )
    if n == 0:
        return np.zeros(0, dtype=np.uint32), bits

    counts = np.zeros(1 << bits, dtype=np.uint64)
    for i in range(n_entries):
        counts[entries[2 * i]] = entries[2 * i + 1]
    cum = np.zeros(counts.size + 1, dtype=np.uint64)
    np.cumsum(counts, out=cum[1:])
    total = int(cum[-1])
    if total == 0:
        raise ContainerError("entropy payload has an empty frequency table")

    dec = _Decoder(payload[off:off + coded_len])
    out = np.empty(n, dtype=np.uint32)
    cum_arr = cum.astype(np.int64)
    cum_list = cum_arr.tolist()
    count_list = counts.tolist()
    for i in range(n):
        target = dec.decode_target(total)
        s = int(np.searchsorted(cum_arr, target, side="right")) - 1
        dec.consume(cum_list[s], count_list[s])
        out[i] = s
    return out, bits


def payload_size(symbols: np.ndarray, bits: int) -> int:
    return len(encode_symbols(symbols, bits))
