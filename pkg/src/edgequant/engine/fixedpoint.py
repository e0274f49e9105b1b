"""Integer-only requantization: Q31 multipliers and rounding shifts.

A positive real multiplier ``M`` is stored as ``m0 * 2**-31 * 2**-right_shift``
with ``m0`` in ``[2**30, 2**31)``. Multipliers >= 1 get a negative right
shift, i.e. a saturating left shift applied before the high multiply.
All helpers are vectorized over int64 numpy arrays holding int32 values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgumentError

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1


@dataclass(frozen=True)
class FixedPointMultiplier:
    m0: int
    right_shift: int

    @classmethod
    def from_real(cls, m: float) -> "FixedPointMultiplier":
        m0, shift = quantize_multiplier(m)
        return cls(int(m0), int(shift))

    @property
    def real(self) -> float:
        return self.m0 * 2.0**-31 * 2.0 ** -self.right_shift


def quantize_multiplier(m) -> tuple:
    """Split positive real multiplier(s) into (m0, right_shift) arrays."""
    arr = np.atleast_1d(np.asarray(m, dtype=np.float64))
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise InvalidArgumentError("fixed-point multipliers must be finite and > 0")
    m0 = np.empty(arr.shape, dtype=np.int64)
    shift = np.empty(arr.shape, dtype=np.int64)
    for i, v in enumerate(arr.tolist()):
        frac, exp = math.frexp(v)
        q = round(frac * 2**31)
        if q == 2**31:
            q //= 2
            exp += 1
        m0[i], shift[i] = q, -exp
    if np.ndim(m) == 0:
        return int(m0[0]), int(shift[0])
    return m0, shift


def saturate_i32(x):
    return np.clip(x, INT32_MIN, INT32_MAX)


def saturating_rounding_doubling_high_mul(a, b):
    """High 32 bits of ``2*a*b`` with round-half-away-from-zero."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    overflow = (a == INT32_MIN) & (b == INT32_MIN)
    ab = a * b
    nudge = np.where(ab >= 0, 1 << 30, 1 - (1 << 30))
    t = ab + nudge
    # C-style division truncates toward zero
    hi = np.where(t >= 0, t >> 31, -((-t) >> 31))
    return np.where(overflow, INT32_MAX, hi)


def rounding_divide_by_pot(x, exponent):
    """``x / 2**exponent`` rounded half away from zero, exponent >= 0."""
    x = np.asarray(x, dtype=np.int64)
    exponent = np.asarray(exponent, dtype=np.int64)
    mask = (np.int64(1) << exponent) - 1
    remainder = x & mask
    threshold = (mask >> 1) + (x < 0)
    return (x >> exponent) + (remainder > threshold)


def multiply_by_quantized_multiplier(x, m0, right_shift):
    """round(x * M) in integer arithmetic; broadcasts m0/right_shift per channel."""
    x = np.asarray(x, dtype=np.int64)
    right_shift = np.asarray(right_shift, dtype=np.int64)
    left = np.maximum(-right_shift, 0)
    right = np.maximum(right_shift, 0)
    x = saturate_i32(x << left)
    return rounding_divide_by_pot(saturating_rounding_doubling_high_mul(x, m0), right)


def saturating_rounding_multiply(acc, m: FixedPointMultiplier):
    """Scalar/array entry point: ``round(acc * m.real)`` saturated to int32."""
    out = multiply_by_quantized_multiplier(saturate_i32(np.asarray(acc, dtype=np.int64)), m.m0, m.right_shift)
    out = saturate_i32(out)
    return int(out) if np.ndim(out) == 0 else out
