"""Integer range coder over per-symbol CDF tables, and the ``.rdc`` container.

The coder is a carry-propagating range coder with a 64-bit window. Only python
integers are used in the coding loop, so output bytes are identical on every
platform. CDF tables use 16-bit precision. Each table carries an escape bin;
symbols outside the table's support are sent as the escape symbol followed by
an Elias-style sequence of raw 15-bit chunks.
"""

from __future__ import annotations

import struct
import zlib
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION

_WINDOW = 64
_MASK = (1 << _WINDOW) - 1
_TOP = 1 << (_WINDOW - 8)
_CARRY = 1 << _WINDOW
_CACHE_LIMIT = 0xFF << (_WINDOW - 8)
_NUM_BYTES = _WINDOW // 8

_RAW_BITS = 15


class CodingError(ValueError):
    """A symbol could not be coded or a stream could not be decoded."""


@dataclass(frozen=True)
class CdfTable:
    """Quantized CDF over ``offset .. offset + len(cdf) - 2`` (plus escape, if enabled).

    ``cdf`` starts at 0, ends at ``2**16`` and is strictly increasing. With
    ``escape`` set, the last bin is the escape symbol.
    """

    cdf: tuple
    offset: int
    escape: bool = True

    def __post_init__(self):
        cdf = tuple(int(c) for c in self.cdf)
        if len(cdf) < 2 or cdf[0] != 0 or cdf[-1] != TOTAL:
            raise ValueError("cdf must start at 0 and end at 2**16")
        if any(b <= a for a, b in zip(cdf, cdf[1:])):
            raise ValueError("cdf must be strictly increasing")
        if self.escape and len(cdf) < 3:
            raise ValueError("an escape table needs at least one regular symbol")
        object.__setattr__(self, "cdf", cdf)

    @property
    def num_regular(self) -> int:
        return len(self.cdf) - 1 - int(self.escape)

    @property
    def support(self) -> tuple[int, int]:
        return self.offset, self.offset + self.num_regular - 1

    def probabilities(self) -> np.ndarray:
        return np.diff(np.asarray(self.cdf, dtype=np.int64)) / TOTAL

    @classmethod
    def uniform(cls, n: int, offset: int = 0) -> "CdfTable":
        """Uniform table over ``n`` symbols without escape (``n`` must divide 2**16 evenly
        for an exactly uniform code; otherwise the first bins get one extra count)."""
        base, extra = divmod(TOTAL, n)
        freqs = [base + (1 if i < extra else 0) for i in range(n)]
        return cls(tuple(np.concatenate([[0], np.cumsum(freqs)])), offset, escape=False)


def quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """Integer frequencies summing to ``2**16``, each at least 1.

    Every bin gets ``floor`` or ``ceil`` of ``p * 2**16`` (largest-remainder
    rounding). Only when bins forced up to 1 leave an excess are some large
    bins lowered by one extra count.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.ndim != 1 or len(pmf) == 0 or np.any(pmf < 0) or not np.isfinite(pmf).all():
        raise ValueError("pmf must be a non-empty 1-D array of non-negative reals")
    if len(pmf) > TOTAL:
        raise ValueError("too many bins for 16-bit precision")
    scaled = pmf / pmf.sum() * TOTAL
    freq = np.maximum(np.floor(scaled).astype(np.int64), 1)
    frac = scaled - np.floor(scaled)
    deficit = TOTAL - int(freq.sum())
    if deficit > 0:
        cand = np.flatnonzero((freq < np.ceil(scaled)))
        order = cand[np.argsort(-frac[cand], kind="stable")]
        freq[order[:deficit]] += 1
    while deficit < 0:
        cand = np.flatnonzero(freq > 1)
        order = cand[np.argsort(frac[cand], kind="stable")][:-deficit]
        freq[order] -= 1
        deficit += len(order)
    return freq


def table_from_pmf(pmf: np.ndarray, offset: int, escape: bool = True) -> CdfTable:
    """``pmf`` holds the regular bins followed, if ``escape``, by the tail mass."""
    freq = quantize_pmf(pmf)
    return CdfTable(tuple(np.concatenate([[0], np.cumsum(freq)])), int(offset), escape)


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()
        self._finished = False

    def _shift_low(self) -> None:
        if self.low < _CACHE_LIMIT or self.low >= _CARRY:
            carry = self.low >> _WINDOW
            temp = self._cache
            while True:
                self._out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self._cache_size -= 1
                if self._cache_size == 0:
                    break
            self._cache = (self.low >> (_WINDOW - 8)) & 0xFF
        self._cache_size += 1
        self.low = (self.low << 8) & _MASK

    def encode_interval(self, start: int, freq: int) -> None:
        r = self.range >> PRECISION
        self.low += start * r
        self.range = freq * r
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode(self, symbol: int, table: CdfTable) -> None:
        cdf = table.cdf
        idx = symbol - table.offset
        n = table.num_regular
        if 0 <= idx < n:
            self.encode_interval(cdf[idx], cdf[idx + 1] - cdf[idx])
            return
        if not table.escape:
            raise CodingError(f"symbol {symbol} outside support {table.support} and no escape bin")
        self.encode_interval(cdf[n], cdf[n + 1] - cdf[n])
        if idx < 0:
            value = 2 * (-idx - 1) + 1
        else:
            value = 2 * (idx - n)
        self._encode_raw(value)

    def _encode_raw(self, value: int) -> None:
        # chunks of 15 payload bits, low bit flags a following chunk
        while True:
            chunk = value & ((1 << _RAW_BITS) - 1)
            value >>= _RAW_BITS
            more = int(value > 0)
            self.encode_interval((chunk << 1) | more, 1)
            if not more:
                return

    def finish(self) -> bytes:
        if self._finished:
            return bytes(self._out)
        # pick the value in [low, low + range) with the most trailing zeros
        hi = self.low + self.range - 1
        for k in range(_WINDOW + 8, -1, -1):
            v = ((self.low + (1 << k) - 1) >> k) << k
            if v <= hi:
                self.low = v
                break
        for _ in range(_NUM_BYTES + 1):
            self._shift_low()
        self._finished = True
        out = bytes(self._out[1:])  # first byte is always zero
        self._out = bytearray(out.rstrip(b"\x00"))
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = bytes(data)
        self._pos = 0
        self.range = _MASK
        self.code = 0
        for _ in range(_NUM_BYTES):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        # trailing zeros were stripped by the encoder
        pos = self._pos
        self._pos += 1
        return self._data[pos] if pos < len(self._data) else 0

    def _decode_target(self) -> tuple[int, int]:
        r = self.range >> PRECISION
        target = self.code // r
        if target >= TOTAL:
            raise CodingError("corrupted stream: decoder target outside table range")
        return target, r

    def _consume(self, start: int, freq: int, r: int) -> None:
        self.code -= start * r
        self.range = freq * r
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next_byte()) & _MASK
            self.range <<= 8

    def decode(self, table: CdfTable) -> int:
        cdf = table.cdf
        target, r = self._decode_target()
        idx = bisect_right(cdf, target) - 1
        self._consume(cdf[idx], cdf[idx + 1] - cdf[idx], r)
        n = table.num_regular
        if idx < n:
            return table.offset + idx
        value = self._decode_raw()
        if value & 1:
            return table.offset - (value >> 1) - 1
        return table.offset + n + (value >> 1)

    def _decode_raw(self) -> int:
        value, shift = 0, 0
        while True:
            target, r = self._decode_target()
            self._consume(target, 1, r)
            value |= (target >> 1) << shift
            shift += _RAW_BITS
            if not target & 1:
                return value
            if shift > 64 * _RAW_BITS:
                raise CodingError("corrupted stream: runaway escape value")


def range_encode(symbols: Iterable[int], cdfs: Sequence[CdfTable]) -> bytes:
    symbols = [int(s) for s in symbols]
    if len(symbols) != len(cdfs):
        raise ValueError(f"{len(symbols)} symbols but {len(cdfs)} tables")
    enc = RangeEncoder()
    for s, table in zip(symbols, cdfs):
        enc.encode(s, table)
    return enc.finish()


def range_decode(data: bytes, cdfs: Sequence[CdfTable], n: int | None = None) -> list[int]:
    n = len(cdfs) if n is None else n
    if n > len(cdfs):
        raise ValueError(f"asked for {n} symbols but only {len(cdfs)} tables given")
    dec = RangeDecoder(data)
    return [dec.decode(cdfs[i]) for i in range(n)]


# ---------------------------------------------------------------------------
# container

MAGIC = b"RDCB"
FORMAT_VERSION = 1

# magic, version, flags, config hash, width, height, pad_h, pad_w,
# lambda, rho, steps, gamma, y shape (C, H, W), z shape (C, H, W)
_HEADER = struct.Struct("<4sHH16sIIHHddIdHHHHHH")
_CRC = struct.Struct("<I")
_LENGTHS = struct.Struct("<III")


class BitstreamError(ValueError):
    pass


class BadMagicError(BitstreamError):
    pass


class VersionMismatchError(BitstreamError):
    pass


class ChecksumError(BitstreamError):
    pass


class TruncatedStreamError(BitstreamError):
    pass


@dataclass
class Header:
    config_hash: bytes
    width: int
    height: int
    pad_h: int = 0
    pad_w: int = 0
    lmbda: float = 0.0
    rho: float = 0.0
    steps: int = 100
    gamma: float = 0.8
    y_shape: tuple = (0, 0, 0)
    z_shape: tuple = (0, 0, 0)
    version: int = FORMAT_VERSION
    flags: int = 0


@dataclass
class Bitstream:
    header: Header
    z_bytes: bytes = b""
    y_bytes: bytes = b""
    extra: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        return write_bitstream(self.header, self.z_bytes, self.y_bytes)

    @property
    def num_bytes(self) -> int:
        return len(self.to_bytes())

    @property
    def bpp(self) -> float:
        return self.num_bytes * 8 / (self.header.width * self.header.height)

    @property
    def payload_bits(self) -> int:
        return 8 * (len(self.z_bytes) + len(self.y_bytes))


def write_bitstream(header: Header, z_bytes: bytes, y_bytes: bytes) -> bytes:
    if len(header.config_hash) != 16:
        raise ValueError("config hash must be 16 bytes")
    head = _HEADER.pack(
        MAGIC, header.version, header.flags, header.config_hash,
        header.width, header.height, header.pad_h, header.pad_w,
        float(header.lmbda), float(header.rho), header.steps, float(header.gamma),
        *header.y_shape, *header.z_shape,
    )
    payload_crc = zlib.crc32(z_bytes + y_bytes)
    lengths = _LENGTHS.pack(len(z_bytes), len(y_bytes), payload_crc)
    body = head + lengths
    return body + _CRC.pack(zlib.crc32(body)) + z_bytes + y_bytes


def read_bitstream(data: bytes) -> Bitstream:
    fixed = _HEADER.size + _LENGTHS.size + _CRC.size
    if len(data) < 4:
        raise TruncatedStreamError("stream shorter than the magic number")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    if len(data) < fixed:
        raise TruncatedStreamError(f"header needs {fixed} bytes, got {len(data)}")
    fields = _HEADER.unpack_from(data, 0)
    version = fields[1]
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"stream version {version}, reader supports {FORMAT_VERSION}")
    body_len = _HEADER.size + _LENGTHS.size
    (crc,) = _CRC.unpack_from(data, body_len)
    if zlib.crc32(data[:body_len]) != crc:
        raise ChecksumError("header CRC mismatch")
    z_len, y_len, payload_crc = _LENGTHS.unpack_from(data, _HEADER.size)
    if len(data) < fixed + z_len + y_len:
        raise TruncatedStreamError(
            f"payload needs {z_len + y_len} bytes, got {len(data) - fixed}")
    z_bytes = data[fixed:fixed + z_len]
    y_bytes = data[fixed + z_len:fixed + z_len + y_len]
    if zlib.crc32(z_bytes + y_bytes) != payload_crc:
        raise ChecksumError("payload CRC mismatch")
    header = Header(
        config_hash=fields[3], width=fields[4], height=fields[5], pad_h=fields[6], pad_w=fields[7],
        lmbda=fields[8], rho=fields[9], steps=fields[10], gamma=fields[11],
        y_shape=tuple(fields[12:15]), z_shape=tuple(fields[15:18]),
        version=version, flags=fields[2],
    )
    return Bitstream(header, z_bytes, y_bytes)


HEADER_BYTES = _HEADER.size + _LENGTHS.size + _CRC.size
