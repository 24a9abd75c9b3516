"""Prime-field arithmetic and the signed fixed-point codec.

Every shared quantity in this package is a residue mod a fixed prime p,
interpreted as a signed real scaled by 2**h:

    code(x) = round(2**h * x) mod p

Negative reals live in the upper half of [0, p).  All protocol modules are
generic over :class:`FieldParams`; two instances are provided, the production
128-bit prime and a small test prime for exhaustive checks.

Field elements are plain Python ints (always reduced mod p).  Vectorized
helpers operate on numpy object arrays so shapes and slicing behave like any
other numpy code while values keep arbitrary precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DecodeOutOfBand, OverflowRange


def _is_probable_prime(n: int) -> bool:
    # deterministic Miller-Rabin for n < 3.3e24, plenty for our fixed moduli
    if n < 2:
        return False
    small = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41]
    for q in small:
        if n % q == 0:
            return n == q
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in small:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class FieldParams:
    """Modulus and fixed-point layout.

    p           prime modulus
    h           fractional bits of the encoding
    k           total significand bit budget (band is |x| < 2**(k-h-1))
    lambda_stat statistical masking bits for masked openings
    """

    p: int
    h: int = 32
    k: int = 64
    lambda_stat: int = 40

    def __post_init__(self):
        if self.h >= self.k:
            raise ValueError("h must be smaller than k")
        if self.p <= 1 << (self.k + self.lambda_stat + 1):
            raise ValueError("p must exceed 2**(k+lambda_stat+1) for masked truncation")
        if not _is_probable_prime(self.p):
            raise ValueError("modulus is not prime")

    @property
    def scale(self) -> int:
        return 1 << self.h

    @property
    def max_abs(self) -> float:
        """Upper bound of the representable band at scale h."""
        return float(1 << (self.k - self.h - 1))

    @property
    def half_band(self) -> int:
        """Signed raw band: centered lifts must satisfy |v| < half_band."""
        return 1 << (self.k - 1)

    @property
    def mask_bits(self) -> int:
        """Width of truncation masks; leaves lambda_stat bits of headroom in p."""
        return self.p.bit_length() - 2

    @property
    def open_band(self) -> int:
        """Largest shifted magnitude a masked opening can hide: 2**(mask_bits - lambda)."""
        return 1 << (self.mask_bits - self.lambda_stat)


# Production modulus: the Mersenne prime 2**127 - 1.
P128 = (1 << 127) - 1
DEFAULT_PARAMS = FieldParams(p=P128)

# Small prime for exhaustive tests; protocol code never assumes which one is active.
P_TOY = (1 << 61) - 1


def toy_params(h: int = 2, k: int = 6, lambda_stat: int = 12) -> FieldParams:
    return FieldParams(p=P_TOY, h=h, k=k, lambda_stat=lambda_stat)


# --- scalar field ops ------------------------------------------------------

def field_add(a: int, b: int, params: FieldParams) -> int:
    return (a + b) % params.p


def field_sub(a: int, b: int, params: FieldParams) -> int:
    return (a - b) % params.p


def field_mul(a: int, b: int, params: FieldParams) -> int:
    return a * b % params.p


def field_neg(a: int, params: FieldParams) -> int:
    return -a % params.p


def field_inv(a: int, params: FieldParams) -> int:
    if a % params.p == 0:
        raise ZeroDivisionError("cannot invert 0 in the field")
    return pow(a, params.p - 2, params.p)


# --- fixed-point codec -----------------------------------------------------

def raw_band(params: FieldParams, scale_bits: int) -> int:
    """Signed raw-magnitude band at a given scale: k significand bits total."""
    return 1 << (params.k - 1 - params.h + scale_bits)


def encode(x: float, params: FieldParams, scale_bits: int | None = None) -> int:
    """Encode a real as round(2**s * x) mod p, rounding half away from zero."""
    s = params.h if scale_bits is None else scale_bits
    if not math.isfinite(x):
        raise OverflowRange(f"{x!r} is not encodable")
    # exact: x = num/den with den a power of two, so round() never sees a float
    num, den = float(x).as_integer_ratio()
    mag, rem = divmod(abs(num) << s, den)
    if 2 * rem >= den:
        mag += 1
    if mag >= raw_band(params, s):
        raise OverflowRange(f"{x!r} outside the representable band")
    return (-mag if x < 0 else mag) % params.p


def centered_lift(raw: int, params: FieldParams) -> int:
    raw %= params.p
    return raw - params.p if raw > params.p // 2 else raw


def decode(raw: int, params: FieldParams, scale_bits: int | None = None) -> float:
    """Inverse of :func:`encode`; raises if the lift leaves the signed band."""
    s = params.h if scale_bits is None else scale_bits
    v = centered_lift(raw, params)
    if abs(v) >= raw_band(params, s):
        raise DecodeOutOfBand(f"raw value {raw} decodes outside the band")
    return v / (1 << s)


def public_truncate(raw: int, params: FieldParams, shift: int | None = None) -> int:
    """Plaintext analogue of share truncation: drop `shift` fractional bits.

    Takes a code at scale h+shift back to scale h, rounding toward zero on the
    centered lift (the masked protocol differs by at most 1 ulp).
    """
    s = shift if shift is not None else params.h
    v = centered_lift(raw, params)
    q = abs(v) >> s
    return (-q if v < 0 else q) % params.p


# --- vector helpers (object arrays of ints) --------------------------------

def encode_array(x, params: FieldParams, scale_bits: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    out = np.empty(arr.shape, dtype=object)
    flat_in = arr.ravel()
    flat_out = out.ravel()
    for i in range(flat_in.size):
        flat_out[i] = encode(float(flat_in[i]), params, scale_bits)
    return out


def decode_array(raw: np.ndarray, params: FieldParams, scale_bits: int | None = None) -> np.ndarray:
    arr = np.asarray(raw, dtype=object)
    out = np.empty(arr.shape, dtype=float)
    flat_in = arr.ravel()
    flat_out = out.ravel()
    for i in range(flat_in.size):
        flat_out[i] = decode(int(flat_in[i]), params, scale_bits)
    return out


def mod_array(raw, params: FieldParams) -> np.ndarray:
    return np.asarray(raw, dtype=object) % params.p


def zeros(shape) -> np.ndarray:
    out = np.empty(shape, dtype=object)
    out[...] = 0
    return out


# --- wire format ------------------------------------------------------------

WIRE_BYTES = 16


def to_wire(value: int) -> bytes:
    """16-byte little-endian unsigned representation, shared with transport."""
    return int(value).to_bytes(WIRE_BYTES, "little")


def from_wire(data: bytes) -> int:
    if len(data) != WIRE_BYTES:
        raise ValueError("field element wire format is exactly 16 bytes")
    return int.from_bytes(data, "little")


def pack_elements(values) -> bytes:
    return b"".join(int(v).to_bytes(WIRE_BYTES, "little") for v in values)


def unpack_elements(data: bytes) -> list[int]:
    if len(data) % WIRE_BYTES:
        raise ValueError("payload length is not a multiple of 16")
    return [
        int.from_bytes(data[i : i + WIRE_BYTES], "little")
        for i in range(0, len(data), WIRE_BYTES)
    ]
