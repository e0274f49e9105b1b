"""Dense tensors, dtypes and the scalar quantization primitives.

Everything here is a pure function over numpy arrays. Rounding is
round-half-to-even throughout (``np.rint``) and the int8 range is the signed
two's complement range [-128, 127].
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError

QMIN = -128
QMAX = 127


class DType(enum.Enum):
    F32 = "f32"
    F16 = "f16"
    I8 = "i8"
    I32 = "i32"
    U8 = "u8"

    @property
    def itemsize(self) -> int:
        return _ITEMSIZE[self]

    @property
    def numpy(self) -> np.dtype:
        return np.dtype(_NUMPY[self])

    @classmethod
    def from_numpy(cls, dt) -> "DType":
        dt = np.dtype(dt)
        for k, v in _NUMPY.items():
            if np.dtype(v) == dt:
                return k
        raise InvalidArgumentError(f"unsupported numpy dtype {dt}")


_ITEMSIZE = {DType.F32: 4, DType.F16: 2, DType.I8: 1, DType.I32: 4, DType.U8: 1}
_NUMPY = {
    DType.F32: "<f4",
    DType.F16: "<f2",
    DType.I8: "i1",
    DType.I32: "<i4",
    DType.U8: "u1",
}


@dataclass(frozen=True)
class QuantParams:
    """Affine quantization parameters: ``real = (q - zero_point) * scale``.

    ``axis`` is None for per-tensor parameters, otherwise the channel axis the
    per-channel lists run along.
    """

    scales: tuple
    zero_points: tuple
    axis: Optional[int] = None
    symmetric: bool = False

    def __post_init__(self):
        scales = tuple(float(np.float32(s)) for s in np.atleast_1d(self.scales))
        zps = tuple(int(z) for z in np.atleast_1d(self.zero_points))
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "zero_points", zps)
        if len(scales) != len(zps):
            raise InvalidArgumentError("scales and zero_points differ in length")
        if self.axis is None and len(scales) != 1:
            raise InvalidArgumentError("per-tensor qparams need exactly one scale")
        if not scales:
            raise InvalidArgumentError("qparams need at least one scale")
        for s in scales:
            if not (math.isfinite(s) and s > 0):
                raise InvalidArgumentError(f"scale must be finite and > 0, got {s}")
        for z in zps:
            if not QMIN <= z <= QMAX:
                raise InvalidArgumentError(f"zero_point {z} outside [-128, 127]")
        if self.symmetric and any(zps):
            raise InvalidArgumentError("symmetric qparams require zero_point 0")

    @property
    def per_channel(self) -> bool:
        return self.axis is not None

    @property
    def scale(self) -> float:
        """The single scale of a per-tensor parameter set."""
        if self.per_channel:
            raise InvalidArgumentError("per-channel qparams have no single scale")
        return self.scales[0]

    @property
    def zero_point(self) -> int:
        if self.per_channel:
            raise InvalidArgumentError("per-channel qparams have no single zero point")
        return self.zero_points[0]

    def scale_array(self) -> np.ndarray:
        return np.asarray(self.scales, dtype=np.float32)

    def zp_array(self) -> np.ndarray:
        return np.asarray(self.zero_points, dtype=np.int32)

    def broadcast(self, ndim: int):
        """Scales (f64) and zero points (i64) shaped to broadcast against a tensor."""
        s = np.asarray(self.scales, dtype=np.float64)
        z = np.asarray(self.zero_points, dtype=np.int64)
        if not self.per_channel:
            return s[0], z[0]
        shape = [1] * ndim
        shape[self.axis] = len(self.scales)
        return s.reshape(shape), z.reshape(shape)

    def to_dict(self) -> dict:
        return {
            "scales": list(self.scales),
            "zero_points": list(self.zero_points),
            "axis": self.axis,
            "symmetric": self.symmetric,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(
            scales=tuple(d["scales"]),
            zero_points=tuple(d["zero_points"]),
            axis=d.get("axis"),
            symmetric=bool(d.get("symmetric", False)),
        )


@dataclass
class Tensor:
    """A dense row-major array plus its dtype tag and optional qparams.

    int8 tensors always carry qparams. i32 tensors may carry them too, which is
    how full-integer biases record their ``s_in * s_w`` scale.
    """

    data: np.ndarray
    qparams: Optional[QuantParams] = None
    dtype: DType = field(init=False)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        self.dtype = DType.from_numpy(self.data.dtype)
        if self.dtype is DType.I8 and self.qparams is None:
            raise InvalidArgumentError("int8 tensor requires qparams")
        if self.qparams is not None:
            if self.dtype not in (DType.I8, DType.I32):
                raise InvalidArgumentError(f"qparams not allowed on {self.dtype.value} tensor")
            qp = self.qparams
            if qp.per_channel:
                if not 0 <= qp.axis < self.data.ndim:
                    raise InvalidArgumentError(f"qparams axis {qp.axis} out of range")
                if self.data.shape[qp.axis] != len(qp.scales):
                    raise InvalidArgumentError(
                        f"per-channel qparams have {len(qp.scales)} scales for axis of size "
                        f"{self.data.shape[qp.axis]}"
                    )

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def nbytes(self) -> int:
        return self.size * self.dtype.itemsize

    def to_float(self) -> np.ndarray:
        """f32 view of the values: dequantized for int8, widened for f16."""
        if self.dtype is DType.F32:
            return self.data
        if self.dtype is DType.F16:
            return f16_to_f32(self.data.view(np.uint16))
        if self.qparams is not None:
            return dequantize(self)
        return self.data.astype(np.float32)

    def equals(self, other: "Tensor") -> bool:
        """Bit-exact comparison (dtype, shape, bytes, qparams)."""
        return (
            self.dtype is other.dtype
            and self.shape == other.shape
            and self.qparams == other.qparams
            and self.data.tobytes() == other.data.tobytes()
        )


def _check_finite(*values):
    for v in values:
        if not math.isfinite(v):
            raise InvalidArgumentError(f"non-finite range value {v}")


def _safe_scale(scale: float) -> float:
    s = float(np.float32(scale))
    # ranges narrower than the smallest normal f32 would underflow the scale
    return max(s, float(np.finfo(np.float32).tiny))


def choose_qparams_symmetric(max_abs, axis: Optional[int] = None) -> QuantParams:
    """Symmetric int8 parameters: scale = max_abs / 127, zero point 0.

    ``max_abs`` may be a scalar or, together with ``axis``, one value per
    channel. A zero range falls back to scale 1.0.
    """
    vals = np.atleast_1d(np.asarray(max_abs, dtype=np.float64))
    _check_finite(*vals.tolist())
    if np.any(vals < 0):
        raise InvalidArgumentError("max_abs must be >= 0")
    scales = [1.0 if v == 0 else _safe_scale(v / 127.0) for v in vals.tolist()]
    if axis is None and len(scales) != 1:
        raise InvalidArgumentError("several ranges given without a channel axis")
    return QuantParams(tuple(scales), (0,) * len(scales), axis=axis, symmetric=True)


def asymmetric_params(min_v, max_v):
    """Vectorized core of :func:`choose_qparams_asymmetric`.

    Returns ``(scales, zero_points)`` as float64 / int64 arrays; scales are
    rounded to float32 precision so they agree with stored QuantParams.
    """
    lo = np.minimum(np.asarray(min_v, dtype=np.float64), 0.0)
    hi = np.maximum(np.asarray(max_v, dtype=np.float64), 0.0)
    degenerate = lo == hi
    scale = ((hi - lo) / (QMAX - QMIN)).astype(np.float32).astype(np.float64)
    scale = np.where(degenerate, 1.0, np.maximum(scale, float(np.finfo(np.float32).tiny)))
    # zero point from the exact range ratio, not the f32-rounded scale, so
    # ties such as (-1, 1) land where the formula says
    span = np.where(degenerate, 1.0, hi - lo)
    zp = np.where(degenerate, 0, np.clip(np.rint(QMIN - lo * (QMAX - QMIN) / span), QMIN, QMAX))
    return scale, zp.astype(np.int64)


def choose_qparams_asymmetric(min_v: float, max_v: float) -> QuantParams:
    """Asymmetric per-tensor int8 parameters covering ``[min_v, max_v] ∪ {0}``."""
    min_v, max_v = float(min_v), float(max_v)
    _check_finite(min_v, max_v)
    if min_v > max_v:
        raise InvalidArgumentError(f"min {min_v} > max {max_v}")
    scale, zp = asymmetric_params(min_v, max_v)
    return QuantParams((float(scale),), (int(zp),))


def quantize_array(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    """Raw int8 codes for ``x``; see :func:`quantize_affine`."""
    x = np.asarray(x)
    if qp.per_channel:
        if not 0 <= qp.axis < x.ndim or x.shape[qp.axis] != len(qp.scales):
            raise InvalidArgumentError(
                f"per-channel qparams ({len(qp.scales)} channels, axis {qp.axis}) "
                f"do not match tensor of shape {x.shape}"
            )
    s, z = qp.broadcast(x.ndim)
    q = np.rint(x.astype(np.float64) / s) + z
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def quantize_affine(x: np.ndarray, qp: QuantParams) -> Tensor:
    """q = clamp(round_half_even(x / scale) + zero_point, -128, 127)."""
    return Tensor(quantize_array(x, qp), qp)


def dequantize(q, qp: Optional[QuantParams] = None) -> np.ndarray:
    """x = (q - zero_point) * scale, as float32."""
    if isinstance(q, Tensor):
        qp = qp or q.qparams
        q = q.data
    if qp is None:
        raise InvalidArgumentError("dequantize needs qparams")
    q = np.asarray(q)
    s, z = qp.broadcast(q.ndim)
    return ((q.astype(np.int64) - z) * s).astype(np.float32)


# --- IEEE 754 binary16 -------------------------------------------------------


def f32_to_f16(x) -> np.ndarray:
    """Encode float32 values as binary16 bit patterns (uint16), round-half-even.

    Overflow saturates to signed infinity, results in the subnormal range are
    kept as subnormals, NaN stays NaN (quiet bit set).
    """
    bits = np.asarray(x, dtype=np.float32).view(np.uint32).astype(np.int64)
    sign = (bits >> 16) & 0x8000
    exp = (bits >> 23) & 0xFF
    mant = bits & 0x7FFFFF

    # normal range: rebias the exponent, drop 13 mantissa bits with RNE
    h = ((exp - 112) << 10) | (mant >> 13)
    rem = mant & 0x1FFF
    h = h + ((rem > 0x1000) | ((rem == 0x1000) & (h & 1) == 1))
    h = np.minimum(h, 0x7C00)  # rounding carry past the max finite value

    # subnormal range: shift the full 24-bit significand into units of 2^-24
    full = mant | 0x800000
    shift = np.clip(126 - exp, 14, 40)
    q = full >> shift
    r = full & ((np.int64(1) << shift) - 1)
    half = np.int64(1) << (shift - 1)
    sub = q + ((r > half) | ((r == half) & (q & 1) == 1))
    sub = np.where(shift > 24, 0, sub)

    out = np.where(exp > 112, h, sub)
    out = np.where(exp >= 143, 0x7C00, out)
    nan = (exp == 0xFF) & (mant != 0)
    out = np.where(exp == 0xFF, np.where(nan, 0x7E00 | (mant >> 13), 0x7C00), out)
    return (out | sign).astype(np.uint16)


def f16_to_f32(b) -> np.ndarray:
    """Decode binary16 bit patterns (uint16) to float32. Exact."""
    b = np.asarray(b, dtype=np.uint16).astype(np.uint32)
    sign = (b & 0x8000) << 16
    exp = (b >> 10) & 0x1F
    mant = b & 0x3FF

    normal = ((exp + 112) << 23) | (mant << 13)
    special = 0x7F800000 | (mant << 13)
    out = np.where(exp == 0x1F, special, normal)
    out = np.where((exp == 0) & (mant == 0), 0, out).astype(np.uint32)
    res = (out | sign).view(np.float32)
    # subnormals: mant * 2^-24 is exact in f32
    subn = (exp == 0) & (mant != 0)
    if np.any(subn):
        vals = mant.astype(np.float32) * np.float32(2.0**-24)
        vals = np.where(sign != 0, -vals, vals)
        res = np.where(subn, vals, res)
    return np.asarray(res, dtype=np.float32)


def to_f16_tensor(x: np.ndarray) -> Tensor:
    return Tensor(f32_to_f16(x).view(np.float16))


def product(shape: Sequence[int]) -> int:
    n = 1
    for d in shape:
        n *= int(d)
    return n
