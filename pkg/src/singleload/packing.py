"""Two int8 multiplies per 18x27 DSP multiplier, plus the fixed-point helpers.

The low operand ``c`` sits in an 18-bit two's-complement field and ``b`` above
it, so a single product ``a * raw`` carries ``a*c`` in bits [0, 18) and a
lightly corrupted ``a*b`` from bit 18 upward.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LO_BITS = 18
LO_MASK = (1 << LO_BITS) - 1
RAW_BITS = 27
PRODUCT_BITS = 45


@dataclass(frozen=True)
class PackedOperand:
    raw: int

    def __post_init__(self):
        if not 0 <= self.raw < (1 << RAW_BITS):
            raise ValueError(f"packed operand out of range: {self.raw}")

    def unpack(self) -> tuple[int, int]:
        return unpack_operands(self.raw)


@dataclass(frozen=True)
class PackedProduct:
    raw: int
    hi: int
    lo: int


def _check_int8(*vals):
    for v in vals:
        if not -128 <= int(v) <= 127:
            raise ValueError(f"{v} is not int8")


def pack_raw(b, c):
    """Vectorised packing; ``b`` and ``c`` are int8 arrays or scalars."""
    b = np.asarray(b, dtype=np.int64)
    c = np.asarray(c, dtype=np.int64)
    return ((b << LO_BITS) + (c & LO_MASK)) & ((1 << RAW_BITS) - 1)


def pack_operands(b: int, c: int) -> PackedOperand:
    _check_int8(b, c)
    return PackedOperand(int(pack_raw(b, c)))


def unpack_operands(raw):
    raw = np.asarray(raw, dtype=np.int64)
    lo = raw & LO_MASK
    c = np.where(lo >= (1 << (LO_BITS - 1)), lo - (1 << LO_BITS), lo)
    b = raw >> LO_BITS
    b = np.where(b >= 256, b - 512, b)
    if b.ndim == 0:
        return int(b), int(c)
    return b, c


def _signed_raw(raw):
    # the 27-bit port is two's complement: value = b * 2**18 + (c mod 2**18)
    raw = np.asarray(raw, dtype=np.int64)
    return np.where(raw >= (1 << (RAW_BITS - 1)), raw - (1 << RAW_BITS), raw)


def packed_multiply_raw(a, raw):
    """Vectorised multiply and split. Returns (product, hi, lo) arrays.

    The low field holds c's unsigned image, so the high field over-reads by
    ``a`` when c < 0 and under-reads by one when the low product is negative.
    Both corrections are applied here.

    ``a`` may be wider than int8 as long as |a*c| stays below 2**17, which
    covers the 9-bit unsigned softmax probabilities used as multiplicands.
    """
    a = np.asarray(a, dtype=np.int64)
    raw = np.asarray(raw, dtype=np.int64)
    prod = a * _signed_raw(raw)
    lo = prod & LO_MASK
    lo = np.where(lo >= (1 << (LO_BITS - 1)), lo - (1 << LO_BITS), lo)
    c_neg = (raw >> (LO_BITS - 1)) & 1
    hi = (prod >> LO_BITS) + (lo < 0) - a * c_neg
    return prod, hi, lo


def packed_multiply(a: int, p: PackedOperand) -> PackedProduct:
    if not -(1 << 9) <= int(a) < (1 << 9):
        raise ValueError(f"multiplier operand {a} out of range")
    prod, hi, lo = packed_multiply_raw(a, p.raw)
    return PackedProduct(int(prod) & ((1 << PRODUCT_BITS) - 1), int(hi), int(lo))


def exhaustive_packing_check(chunk_a: int = 8, a_values=None, fault=None) -> tuple[bool, int, list]:
    """Check packed products against plain products for every int8 triple.

    Returns (ok, cases_checked, first_failures). ``fault`` is a hook taking
    (hi, lo) arrays and returning a corrupted pair; used for harness tests.
    """
    vals = np.arange(-128, 128, dtype=np.int64)
    b, c = np.meshgrid(vals, vals, indexing="ij")
    b = b.ravel()
    c = c.ravel()
    raw = pack_raw(b, c)
    a_all = vals if a_values is None else np.asarray(a_values, dtype=np.int64)
    checked = 0
    failures = []
    for start in range(0, len(a_all), chunk_a):
        a = a_all[start:start + chunk_a, None]
        _, hi, lo = packed_multiply_raw(a, raw[None, :])
        if fault is not None:
            hi, lo = fault(hi, lo)
        bad = (hi != a * b[None, :]) | (lo != a * c[None, :])
        checked += bad.size
        if bad.any():
            ia, ib = np.nonzero(bad)
            for i, j in zip(ia[:5], ib[:5]):
                failures.append((int(a[i, 0]), int(b[j]), int(c[j])))
    return not failures, checked, failures


def sampled_packing_check(n: int = 1_000_000, seed: int = 0, fault=None) -> tuple[bool, int, list]:
    rng = np.random.default_rng(seed)
    a, b, c = rng.integers(-128, 128, size=(3, n), dtype=np.int64)
    _, hi, lo = packed_multiply_raw(a, pack_raw(b, c))
    if fault is not None:
        hi, lo = fault(hi, lo)
    bad = np.nonzero((hi != a * b) | (lo != a * c))[0]
    return bad.size == 0, n, [(int(a[i]), int(b[i]), int(c[i])) for i in bad[:5]]


# ---------------------------------------------------------------- quantization

@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.zero_point != 0:
            raise ValueError("only symmetric quantization is supported")


def quantize(x, q: QuantParams):
    v = np.clip(np.rint(np.asarray(x, dtype=np.float64) / q.scale), -128, 127).astype(np.int8)
    return v if v.ndim else int(v)


def dequantize(v, q: QuantParams):
    out = np.asarray(v, dtype=np.float64) * q.scale
    return out if out.ndim else float(out)


def round_shift(x, shift: int):
    """Round-half-even of x / 2**shift on int64 arrays (exact)."""
    x = np.asarray(x, dtype=np.int64)
    if shift <= 0:
        return x << (-shift)
    q = x >> shift
    r = x - (q << shift)
    half = np.int64(1) << (shift - 1)
    up = (r > half) | ((r == half) & ((q & 1) == 1))
    return q + up


@dataclass(frozen=True)
class FixedMultiplier:
    """Integer multiplier and right shift standing in for a real ratio."""
    mult: int
    shift: int

    @property
    def value(self) -> float:
        return self.mult / float(1 << self.shift)


def fixed_multiplier(ratio: float, bits: int = 30) -> FixedMultiplier:
    """Choose ``mult`` in [2**(bits-1), 2**bits) unless the ratio is zero."""
    if ratio < 0:
        raise ValueError("ratio must be non-negative")
    if ratio == 0:
        return FixedMultiplier(0, 0)
    m, e = np.frexp(ratio)          # ratio = m * 2**e, m in [0.5, 1)
    shift = bits - int(e)
    mult = int(round(m * (1 << bits)))
    if mult == 1 << bits:
        mult >>= 1
        shift -= 1
    return FixedMultiplier(mult, shift)


def requantize_terms(terms, shift: int, lo: int = -128, hi: int = 127):
    """Sum of ``x * mult`` over (x, mult) pairs, rounded by ``shift`` and clamped."""
    acc = None
    for x, mult in terms:
        part = np.asarray(x, dtype=np.int64) * np.int64(mult)
        acc = part if acc is None else acc + part
    return np.clip(round_shift(acc, shift), lo, hi)


def requantize(acc, m: FixedMultiplier, lo: int = -128, hi: int = 127):
    return requantize_terms([(acc, m.mult)], m.shift, lo, hi)


def common_multipliers(ratios, bits: int = 30) -> tuple[list[int], int]:
    """Express several ratios over one shared shift (set by the largest)."""
    top = max(ratios)
    if top <= 0:
        return [0] * len(ratios), 0
    shift = fixed_multiplier(top, bits).shift
    return [int(round(r * (1 << shift))) for r in ratios], shift
