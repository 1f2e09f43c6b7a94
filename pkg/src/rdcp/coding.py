"""Bit-exact entropy coding: static frequency models, a 32-bit arithmetic
coder, Elias-delta integers and Huffman codes.

Stream format (version 1): MSB-first bits; 32-bit low/high registers;
underflow handled with pending bits; termination emits the fewest bits (at
most two, plus pending) naming a dyadic cell inside the final interval, so
the code is prefix-free. The decoder reads zeros past the end of the stream.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

FORMAT_VERSION = 1
STATE_BITS = 32
FULL = 1 << STATE_BITS
MASK = FULL - 1
HALF = 1 << (STATE_BITS - 1)
QUARTER = 1 << (STATE_BITS - 2)
MAX_TOTAL = 1 << 16


class StreamExhaustedError(ValueError):
    pass


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class FrequencyModel:
    """Static integer frequency table; ``context`` is an optional label (e.g. y)."""

    counts: tuple
    context: Optional[object] = None

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if not counts:
            raise ModelError("model needs at least one symbol")
        if any(c < 1 for c in counts):
            raise ModelError("every modeled symbol needs a count >= 1")
        if sum(counts) > MAX_TOTAL:
            raise ModelError(f"model total {sum(counts)} exceeds {MAX_TOTAL}")
        object.__setattr__(self, "counts", counts)
        cum = [0]
        for c in counts:
            cum.append(cum[-1] + c)
        object.__setattr__(self, "_cum", tuple(cum))

    @property
    def cumulative(self) -> tuple:
        return self._cum

    @property
    def total(self) -> int:
        return self._cum[-1]

    def __len__(self):
        return len(self.counts)

    def prob(self, symbol: int) -> float:
        return self.counts[symbol] / self.total

    def ideal_length(self, symbol: int) -> float:
        return -math.log2(self.prob(symbol))

    @classmethod
    def from_pmf(cls, pmf, total: int = MAX_TOTAL, context=None) -> "FrequencyModel":
        """Scale a pmf to integer counts summing to ``total``.

        Each symbol gets one count, the remainder is split by largest
        remainder (ties to the lower index).
        """
        pmf = np.asarray(pmf, float)
        if np.any(pmf < 0) or pmf.sum() <= 0:
            raise ModelError("pmf must be non-negative with positive mass")
        pmf = pmf / pmf.sum()
        n = len(pmf)
        if total < n or total > MAX_TOTAL:
            raise ModelError(f"total must be in [{n}, {MAX_TOTAL}]")
        spare = total - n
        raw = pmf * spare
        base = np.floor(raw).astype(int)
        short = spare - int(base.sum())
        order = sorted(range(n), key=lambda i: (-(raw[i] - base[i]), i))
        for i in order[:short]:
            base[i] += 1
        return cls(tuple(int(b) + 1 for b in base), context)

    @classmethod
    def uniform(cls, n: int, context=None) -> "FrequencyModel":
        return cls((1,) * n, context)


@dataclass(frozen=True)
class Bitstream:
    """Immutable bit sequence, MSB-first."""

    bits: tuple = ()

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in bits):
            raise ValueError("bits must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    def __len__(self):
        return len(self.bits)

    def __add__(self, other: "Bitstream") -> "Bitstream":
        return Bitstream(self.bits + other.bits)

    def to_bytes(self) -> bytes:
        """Big-endian within bytes; the final byte is zero-padded."""
        out = bytearray((len(self.bits) + 7) // 8)
        for i, b in enumerate(self.bits):
            if b:
                out[i >> 3] |= 0x80 >> (i & 7)
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes, nbits: int) -> "Bitstream":
        if nbits > 8 * len(data):
            raise ValueError("nbits exceeds the data length")
        return cls(tuple((data[i >> 3] >> (7 - (i & 7))) & 1 for i in range(nbits)))

    def __str__(self):
        return "".join(map(str, self.bits))


def _termination(low: int, high: int, pending: int) -> list:
    # shortest k such that a whole dyadic cell of width 2^-k sits inside
    # [low, high]; every continuation of the emitted bits then decodes the same
    for k in range(3):
        unit = 1 << (STATE_BITS - k)
        v = -(-low // unit)
        if (v + 1) * unit <= high + 1:
            break
    else:  # pragma: no cover - range > QUARTER guarantees k <= 2
        raise AssertionError("termination failed")
    if k == 0:
        return []
    vbits = [(v >> (k - 1 - i)) & 1 for i in range(k)]
    return vbits[:1] + [1 - vbits[0]] * pending + vbits[1:]


class ArithmeticEncoder:
    """Single-use encoder state machine."""

    def __init__(self):
        self.low = 0
        self.high = MASK
        self.pending = 0
        self.out: list = []
        self._done = False

    def _emit(self, bit):
        self.out.append(bit)
        if self.pending:
            self.out.extend([1 - bit] * self.pending)
            self.pending = 0

    def encode(self, symbol: int, model: FrequencyModel) -> None:
        if self._done:
            raise RuntimeError("encoder already finished")
        if not 0 <= symbol < len(model):
            raise ModelError(f"symbol {symbol} outside model of size {len(model)}")
        cum = model.cumulative
        total = model.total
        rng = self.high - self.low + 1
        self.high = self.low + rng * cum[symbol + 1] // total - 1
        self.low = self.low + rng * cum[symbol] // total
        while True:
            if self.high < HALF:
                self._emit(0)
            elif self.low >= HALF:
                self._emit(1)
                self.low -= HALF
                self.high -= HALF
            elif self.low >= QUARTER and self.high < HALF + QUARTER:
                self.pending += 1
                self.low -= QUARTER
                self.high -= QUARTER
            else:
                break
            self.low <<= 1
            self.high = (self.high << 1) | 1

    def finish(self) -> Bitstream:
        if not self._done:
            self.out.extend(_termination(self.low, self.high, self.pending))
            self.pending = 0
            self._done = True
        return Bitstream(tuple(self.out))


class ArithmeticDecoder:
    def __init__(self, stream: Bitstream):
        self.bits = stream.bits
        self.pos = 0
        self.low = 0
        self.high = MASK
        self.code = 0
        for _ in range(STATE_BITS):
            self.code = (self.code << 1) | self._next()

    def _next(self) -> int:
        b = self.bits[self.pos] if self.pos < len(self.bits) else 0
        self.pos += 1
        return b

    def decode(self, model: FrequencyModel) -> int:
        cum = model.cumulative
        total = model.total
        rng = self.high - self.low + 1
        value = ((self.code - self.low + 1) * total - 1) // rng
        # largest s with cum[s] <= value
        lo, hi = 0, len(cum) - 1
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if cum[mid] <= value:
                lo = mid
            else:
                hi = mid
        s = lo
        self.high = self.low + rng * cum[s + 1] // total - 1
        self.low = self.low + rng * cum[s] // total
        while True:
            if self.high < HALF:
                pass
            elif self.low >= HALF:
                self.low -= HALF
                self.high -= HALF
                self.code -= HALF
            elif self.low >= QUARTER and self.high < HALF + QUARTER:
                self.low -= QUARTER
                self.high -= QUARTER
                self.code -= QUARTER
            else:
                break
            self.low <<= 1
            self.high = (self.high << 1) | 1
            self.code = (self.code << 1) | self._next()
        return s


def ac_encode(symbols: Sequence[int], models) -> Bitstream:
    """Encode ``symbols``; ``models`` is one FrequencyModel or one per position."""
    models = _per_position(models, len(symbols))
    enc = ArithmeticEncoder()
    for s, m in zip(symbols, models):
        enc.encode(int(s), m)
    return enc.finish()


def ac_decode(stream: Bitstream, models, count: int, allow_trailing: bool = False) -> list:
    """Decode ``count`` symbols.

    The decoded symbols are re-encoded and compared with ``stream``: a stream
    that is not the exact encoding (truncated or altered) raises
    StreamExhaustedError; extra bits after a valid encoding raise ValueError
    unless ``allow_trailing``.
    """
    models = _per_position(models, count)
    dec = ArithmeticDecoder(stream)
    out = [dec.decode(m) for m in models]
    expect = ac_encode(out, models).bits
    got = stream.bits
    if got == expect:
        return out
    if len(got) > len(expect) and got[:len(expect)] == expect:
        if allow_trailing:
            return out
        raise ValueError(f"stream has {len(got) - len(expect)} trailing bits")
    raise StreamExhaustedError(
        f"stream of {len(got)} bits ends before {count} symbols are fully determined "
        f"(truncated or corrupt stream)")


def ac_decode_prefix(stream: Bitstream, models, count: int, pos: int = 0):
    """Decode ``count`` symbols starting at bit ``pos`` of a longer stream.

    Returns (symbols, position after the arithmetic codeword). Valid because
    the code is prefix-free: bits after the codeword cannot change the
    decoded symbols.
    """
    models = _per_position(models, count)
    sub = Bitstream(stream.bits[pos:])
    dec = ArithmeticDecoder(sub)
    out = [dec.decode(m) for m in models]
    expect = ac_encode(out, models).bits
    if sub.bits[:len(expect)] != expect:
        raise StreamExhaustedError(
            f"stream ends before {count} symbols are fully determined (bit {pos})")
    return out, pos + len(expect)


def _per_position(models, n):
    if isinstance(models, FrequencyModel):
        return [models] * n
    models = list(models)
    if len(models) != n:
        raise ModelError(f"{len(models)} models given for {n} symbols")
    return models


def ideal_codelength(symbols: Sequence[int], models) -> float:
    models = _per_position(models, len(symbols))
    return float(sum(m.ideal_length(s) for s, m in zip(symbols, models)))


# -- Elias-delta ----------------------------------------------------------------

def elias_delta_length(k: int) -> int:
    if k < 1:
        raise ValueError("Elias-delta codes positive integers")
    L = k.bit_length() - 1
    return L + 2 * ((L + 1).bit_length() - 1) + 1


def elias_delta_encode(k: int) -> Bitstream:
    if k < 1:
        raise ValueError("Elias-delta codes positive integers")
    L = k.bit_length() - 1
    n = L + 1
    nl = n.bit_length() - 1
    bits = [0] * nl + [(n >> (nl - i)) & 1 for i in range(nl + 1)]
    bits += [(k >> (L - 1 - i)) & 1 for i in range(L)]
    return Bitstream(tuple(bits))


def elias_delta_decode(stream: Bitstream, pos: int = 0):
    """Return (k, next position)."""
    bits = stream.bits
    nl = 0
    while True:
        if pos >= len(bits):
            raise StreamExhaustedError("truncated Elias-delta code")
        if bits[pos]:
            break
        nl += 1
        pos += 1
    if pos + nl + 1 > len(bits):
        raise StreamExhaustedError("truncated Elias-delta code")
    n = 0
    for b in bits[pos:pos + nl + 1]:
        n = (n << 1) | b
    pos += nl + 1
    L = n - 1
    if pos + L > len(bits):
        raise StreamExhaustedError("truncated Elias-delta code")
    k = 1
    for b in bits[pos:pos + L]:
        k = (k << 1) | b
    return k, pos + L


# -- Huffman -----------------------------------------------------------------------

@dataclass(frozen=True)
class PrefixCode:
    """Canonical prefix code; ``codewords[i]`` is a tuple of bits."""

    codewords: tuple

    @property
    def lengths(self) -> tuple:
        return tuple(len(c) for c in self.codewords)

    def kraft_sum(self) -> float:
        return float(sum(2.0 ** -l for l in self.lengths))

    def expected_length(self, pmf) -> float:
        return float(np.dot(np.asarray(pmf, float), self.lengths))

    def encode(self, symbol: int) -> Bitstream:
        return Bitstream(self.codewords[symbol])

    def decode(self, stream: Bitstream, pos: int = 0):
        """Return (symbol, next position)."""
        if len(self.codewords) == 1:
            return 0, pos
        table = {c: i for i, c in enumerate(self.codewords)}
        cur: tuple = ()
        while pos < len(stream.bits):
            cur = cur + (stream.bits[pos],)
            pos += 1
            if cur in table:
                return table[cur], pos
        raise StreamExhaustedError("truncated prefix code")


def huffman_lengths(pmf) -> tuple:
    pmf = [float(p) for p in pmf]
    if not pmf:
        raise ValueError("empty pmf")
    if any(p <= 0 for p in pmf):
        raise ValueError("Huffman code needs a strictly positive pmf")
    n = len(pmf)
    if n == 1:
        return (0,)
    heap = [(p, i, (i,)) for i, p in enumerate(pmf)]
    heapq.heapify(heap)
    lengths = [0] * n
    tick = n
    while len(heap) > 1:
        p1, _, s1 = heapq.heappop(heap)
        p2, _, s2 = heapq.heappop(heap)
        for s in s1 + s2:
            lengths[s] += 1
        heapq.heappush(heap, (p1 + p2, tick, s1 + s2))
        tick += 1
    return tuple(lengths)


def canonical_code(lengths: Sequence[int]) -> PrefixCode:
    if sum(2.0 ** -l for l in lengths) > 1.0 + 1e-12:
        raise ValueError("lengths violate the Kraft inequality")
    order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
    words = [()] * len(lengths)
    code = 0
    prev = lengths[order[0]] if order else 0
    for rank, i in enumerate(order):
        l = lengths[i]
        if rank:
            code = (code + 1) << (l - prev)
        prev = l
        words[i] = tuple((code >> (l - 1 - b)) & 1 for b in range(l))
    return PrefixCode(tuple(words))


def huffman_build(pmf) -> PrefixCode:
    """Optimal prefix code for a strictly positive pmf."""
    return canonical_code(huffman_lengths(pmf))


def bits_from_str(s: str) -> Bitstream:
    return Bitstream(tuple(int(c) for c in s.strip()))


def concat(streams: Iterable[Bitstream]) -> Bitstream:
    bits: tuple = ()
    for s in streams:
        bits += s.bits
    return Bitstream(bits)
