"""Asymmetric weight-only post-training quantization.

Weights are mapped to unsigned ``n``-bit codes with a per-tensor scale ``s``
and integer zero-point ``z``::

    s = (r_max - r_min) / (2**n - 1)
    z = clamp(floor(q_max - r_max / s), 0, 2**n - 1)
    code = clamp(floor(w / s) + z, 0, 2**n - 1)
    w_d = s * (code - z)

The observed range is widened to include 0 so that ``z`` lands inside the
code range and every in-range weight stays within two steps of its
dequantized value.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sidemoe.errors import ConfigError, DimensionError, NumericError

ROUNDING_MODES = ("floor", "nearest")
MIN_BITS, MAX_BITS = 2, 31

_MAGIC = b"SMQT"
_VERSION = 1


def code_dtype(bits: int) -> np.dtype:
    """Smallest unsigned integer dtype holding ``bits``-bit codes."""
    for dt in (np.uint8, np.uint16, np.uint32):
        if bits <= np.iinfo(dt).bits:
            return np.dtype(dt)
    raise ConfigError(f"bitwidth {bits} exceeds {MAX_BITS}")


def _check_bits(n: int) -> int:
    if isinstance(n, bool) or int(n) != n or not MIN_BITS <= n <= MAX_BITS:
        raise ConfigError(f"bitwidth must be an integer in [{MIN_BITS}, {MAX_BITS}], got {n!r}")
    return int(n)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int
    r_min: float
    r_max: float

    def __post_init__(self):
        _check_bits(self.bits)
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ConfigError(f"scale must be positive and finite, got {self.scale}")
        if not 0 <= self.zero_point <= self.q_max:
            raise ConfigError(f"zero-point {self.zero_point} outside [0, {self.q_max}]")
        if not self.r_min <= self.r_max:
            raise ConfigError(f"r_min {self.r_min} > r_max {self.r_max}")

    @property
    def q_min(self) -> int:
        return 0

    @property
    def q_max(self) -> int:
        return (1 << self.bits) - 1

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "zero_point": self.zero_point,
            "bits": self.bits,
            "r_min": self.r_min,
            "r_max": self.r_max,
        }


@dataclass(frozen=True)
class QuantizedTensor:
    codes: np.ndarray
    params: QuantParams
    shape: tuple[int, ...] = field(default=())

    def __post_init__(self):
        codes = np.ascontiguousarray(self.codes, dtype=code_dtype(self.params.bits))
        shape = tuple(int(d) for d in (self.shape or codes.shape))
        if codes.size != math.prod(shape):
            raise DimensionError(f"{codes.size} codes cannot fill shape {shape}")
        if codes.size and int(codes.max()) > self.params.q_max:
            raise ConfigError(f"code {int(codes.max())} exceeds {self.params.q_max}")
        codes = codes.reshape(shape)
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "shape", shape)

    @property
    def size(self) -> int:
        return self.codes.size

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            self.params == other.params
            and self.shape == other.shape
            and np.array_equal(self.codes, other.codes)
        )

    __hash__ = None


def _finite_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ConfigError("cannot calibrate an empty weight tensor")
    if not np.all(np.isfinite(w)):
        raise NumericError("weights contain NaN or infinity")
    return w


def calibrate(weights, n: int = 8) -> QuantParams:
    """Min/max calibration of scale and zero-point for an ``n``-bit code range."""
    n = _check_bits(n)
    w = _finite_weights(weights)
    q_max = (1 << n) - 1
    r_min = min(float(w.min()), 0.0)
    r_max = max(float(w.max()), 0.0)
    span = r_max - r_min
    if span == 0.0:
        # all-zero tensor
        scale = 1.0
        ratio = r_max
    else:
        if not math.isfinite(span):
            raise NumericError(f"weight range [{r_min}, {r_max}] overflows float64")
        scale = span / q_max
        if scale == 0.0:
            raise NumericError(f"weight range {span} is too small for a {n}-bit scale")
        # r_max / s, evaluated without the rounding of s
        ratio = r_max * q_max / span
    z = int(np.clip(math.floor(q_max - ratio), 0, q_max))
    if ratio == q_max - z:
        # r_max sits exactly on the top code; if s rounded up it would floor one short
        for _ in range(4):
            if scale * (q_max - z) <= r_max:
                break
            scale = math.nextafter(scale, 0.0)
    return QuantParams(scale=scale, zero_point=z, bits=n, r_min=r_min, r_max=r_max)


def raw_codes(weights, params: QuantParams, rounding: str = "floor") -> np.ndarray:
    """Integer codes before clamping, as int64.

    In floor mode each code is the largest integer ``c`` whose dequantized
    value ``s * (c - z)`` does not exceed the weight, so the residual
    ``w - w_d`` evaluated in floating point lies in ``[0, s)``.
    """
    if rounding not in ROUNDING_MODES:
        raise ConfigError(f"rounding must be one of {ROUNDING_MODES}, got {rounding!r}")
    w = np.asarray(weights, dtype=np.float64)
    s, z = params.scale, params.zero_point
    if rounding == "nearest":
        return np.rint(w / s).astype(np.int64) + z
    m = np.floor(w / s).astype(np.int64)
    # the floor of w / s can be off by one once s itself is rounded
    m -= (s * m > w).astype(np.int64)
    m += ((w - s * m >= s) | (s * (m + 1) <= w)).astype(np.int64)
    return m + z


def quantize(weights, params: QuantParams, rounding: str = "floor") -> QuantizedTensor:
    w = _finite_weights(weights)
    codes = np.clip(raw_codes(w, params, rounding), 0, params.q_max)
    return QuantizedTensor(codes.astype(code_dtype(params.bits)), params, w.shape)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.params.scale * (q.codes.astype(np.float64) - q.params.zero_point)


def quantization_error(original, q: QuantizedTensor) -> float:
    """Mean squared residual between the float weights and their dequantized codes."""
    w = np.asarray(original, dtype=np.float64)
    if w.shape != q.shape:
        raise DimensionError(f"original shape {w.shape} does not match quantized shape {q.shape}")
    if w.size == 0:
        raise ConfigError("quantization error of an empty tensor is undefined")
    r = w - dequantize(q)
    return float(np.mean(r * r))


def quantize_tensor(weights, n: int = 8, rounding: str = "floor") -> QuantizedTensor:
    """Calibrate and quantize in one call."""
    return quantize(weights, calibrate(weights, n), rounding)


# -- serialization ---------------------------------------------------------

def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    flat = np.asarray(codes, dtype=np.uint64).ravel()
    if bits in (8, 16, 32):
        return flat.astype(f"<u{bits // 8}").tobytes()
    planes = ((flat[:, None] >> np.arange(bits, dtype=np.uint64)) & 1).astype(np.uint8)
    return np.packbits(planes.ravel(), bitorder="little").tobytes()


def unpack_codes(buf: bytes, bits: int, count: int) -> np.ndarray:
    if bits in (8, 16, 32):
        return np.frombuffer(buf, dtype=f"<u{bits // 8}", count=count).astype(code_dtype(bits))
    planes = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")[: count * bits]
    weights = np.uint64(1) << np.arange(bits, dtype=np.uint64)
    vals = (planes.reshape(count, bits).astype(np.uint64) * weights).sum(axis=1)
    return vals.astype(code_dtype(bits))


def to_bytes(q: QuantizedTensor) -> bytes:
    """Binary blob: magic, version, bits, ndim, shape, s (f64), z (i32), r_min, r_max, packed codes."""
    p = q.params
    head = struct.pack("<4sBBH", _MAGIC, _VERSION, p.bits, len(q.shape))
    head += struct.pack(f"<{len(q.shape)}I", *q.shape)
    head += struct.pack("<di", p.scale, p.zero_point)
    head += struct.pack("<dd", p.r_min, p.r_max)
    return head + pack_codes(q.codes, p.bits)


def from_bytes(buf: bytes) -> QuantizedTensor:
    try:
        magic, version, bits, ndim = struct.unpack_from("<4sBBH", buf, 0)
    except struct.error as exc:
        raise ConfigError("truncated quantized-tensor blob") from exc
    if magic != _MAGIC or version != _VERSION:
        raise ConfigError("not a quantized-tensor blob")
    off = 8
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    scale, z = struct.unpack_from("<di", buf, off)
    off += 12
    r_min, r_max = struct.unpack_from("<dd", buf, off)
    off += 16
    params = QuantParams(scale=scale, zero_point=z, bits=bits, r_min=r_min, r_max=r_max)
    codes = unpack_codes(buf[off:], bits, math.prod(shape))
    return QuantizedTensor(codes, params, tuple(shape))


def to_json_dict(q: QuantizedTensor) -> dict:
    return {**q.params.to_dict(), "shape": list(q.shape), "codes": q.codes.ravel().tolist()}


def save(q: QuantizedTensor, path) -> tuple[Path, Path]:
    """Write ``path`` (binary blob) and ``path.json`` (inspection mirror)."""
    path = Path(path)
    path.write_bytes(to_bytes(q))
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(to_json_dict(q), indent=1) + "\n")
    return path, sidecar


def load(path) -> QuantizedTensor:
    return from_bytes(Path(path).read_bytes())
