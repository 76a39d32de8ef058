"""Byte-oriented range coder with carry propagation.

32-bit range, low kept with one carry bit, output delayed through a cache
byte plus a run of pending 0xFF bytes. Frequencies come as cumulative
tables whose total is at most 2**16.
"""
from __future__ import annotations

from bisect import bisect_right
from typing import Sequence

from .entropy import CodingTable

TOP = 1 << 24
MASK32 = (1 << 32) - 1
BYPASS_CDF = [0, 1, 2]


class RangeCoderError(ValueError):
    """Symbol outside a table's support or a malformed/truncated stream."""


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & MASK32

    def encode(self, start: int, size: int, total: int) -> None:
        r = self.range // total
        self.low += start * r
        self.range = size * r
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_symbol(self, index: int, cdf: Sequence[int]) -> None:
        if not 0 <= index < len(cdf) - 1:
            raise RangeCoderError(f"symbol index {index} outside table of {len(cdf) - 1} bins")
        start = cdf[index]
        size = cdf[index + 1] - start
        if size <= 0:
            raise RangeCoderError(f"symbol index {index} has zero frequency")
        self.encode(start, size, cdf[-1])

    def encode_bits(self, value: int, nbits: int) -> None:
        for i in range(nbits - 1, -1, -1):
            self.encode((value >> i) & 1, 1, 2)

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(5):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        if self.pos >= len(self.data):
            raise RangeCoderError("truncated range-coded stream")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def _target(self, total: int) -> tuple[int, int]:
        r = self.range // total
        v = self.code // r
        if v >= total:
            raise RangeCoderError("corrupt range-coded stream")
        return v, r

    def _consume(self, start: int, size: int, r: int) -> None:
        self.code -= start * r
        self.range = size * r
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next()) & MASK32
            self.range <<= 8

    def decode_symbol(self, cdf: Sequence[int]) -> int:
        v, r = self._target(cdf[-1])
        idx = bisect_right(cdf, v) - 1
        self._consume(cdf[idx], cdf[idx + 1] - cdf[idx], r)
        return idx

    def decode_bits(self, nbits: int) -> int:
        value = 0
        for _ in range(nbits):
            bit, r = self._target(2)
            self._consume(bit, 1, r)
            value = (value << 1) | bit
        return value


def range_encode(symbols: Sequence[int], cdfs: Sequence[Sequence[int]]) -> bytes:
    """Code ``symbols[i]`` (a bin index) with cumulative table ``cdfs[i]``."""
    if len(symbols) != len(cdfs):
        raise ValueError("one table per symbol is required")
    enc = RangeEncoder()
    for s, cdf in zip(symbols, cdfs):
        enc.encode_symbol(int(s), cdf)
    return enc.finish()


def range_decode(data: bytes, cdfs: Sequence[Sequence[int]], n: int) -> list[int]:
    if len(cdfs) != n:
        raise ValueError("one table per symbol is required")
    dec = RangeDecoder(data)
    return [dec.decode_symbol(cdf) for cdf in cdfs]


# -- integer values with escape coding ---------------------------------------------


def encode_value(enc: RangeEncoder, value: int, table: CodingTable) -> None:
    """Code an integer; values off the table go out as escape + Elias-gamma."""
    if table.lower <= value <= table.upper:
        enc.encode_symbol(value - table.offset, table.cdf)
        return
    enc.encode_symbol(table.n, table.cdf)
    if value < table.lower:
        enc.encode_bits(1, 1)
        over = table.lower - value
    else:
        enc.encode_bits(0, 1)
        over = value - table.upper
    nb = over.bit_length()
    enc.encode_bits(0, nb - 1)
    enc.encode_bits(over, nb)


def decode_value(dec: RangeDecoder, table: CodingTable) -> int:
    idx = dec.decode_symbol(table.cdf)
    if idx < table.n:
        return idx + table.offset
    negative = dec.decode_bits(1)
    zeros = 0
    while dec.decode_bits(1) == 0:
        zeros += 1
        if zeros > 62:
            raise RangeCoderError("escape code too long")
    over = (1 << zeros) | dec.decode_bits(zeros)
    return table.lower - over if negative else table.upper + over
