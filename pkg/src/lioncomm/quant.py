"""Quantization of update vectors and bit-level packing.

The central piece is ``quantize``, an L_p-normalized integer quantizer:
instead of scaling by the max-norm (which a single outlier can blow up),
values are scaled by the mean p-norm, so heavy-tailed inputs keep most of
their resolution.  ``pack``/``unpack`` turn small-integer vectors into
dense byte payloads for the wire.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import ConfigError, PackFormatError, PackRangeError

PACKABLE_WIDTHS = (1, 2, 4, 8)

# Sentinel accepted for QuantSpec.norm_p alongside float("inf").
INF = float("inf")


@dataclass(frozen=True)
class QuantSpec:
    """Configuration of the integer quantizer.

    bits: output levels span [-(2^(bits-1)-1), 2^(bits-1)-1].
    norm_p: 0 (geometric mean), a finite p > 0, or inf (max norm).
    rounding: "nearest" (half-to-even) or "stochastic".
    log_transform: quantize sign(x)*ln(1+|x|/s) instead of x (s = mean |x|).
    no_zero: nonzero inputs that would quantize to 0 become +/-1 instead.
    """

    bits: int = 8
    norm_p: float = 1.0
    rounding: str = "nearest"
    log_transform: bool = False
    no_zero: bool = False

    def __post_init__(self):
        if self.bits < 1:
            raise ConfigError(f"bits must be >= 1, got {self.bits}")
        if not (self.norm_p == 0 or self.norm_p > 0):
            raise ConfigError(f"norm_p must be 0, positive, or inf: {self.norm_p}")
        if self.rounding not in ("nearest", "stochastic"):
            raise ConfigError(f"unknown rounding mode {self.rounding!r}")

    @property
    def qmax(self) -> int:
        """Largest representable magnitude."""
        return 2 ** (self.bits - 1) - 1


@dataclass(frozen=True)
class SignPolicy:
    """How exact zeros are mapped when a vector is reduced to signs.

    "exact-ternary" keeps zeros.  "alternating" maps 0 -> +1 on odd
    iterations and 0 -> -1 on even ones, so persistent ties cancel over
    any even window instead of accumulating drift.
    """

    mode: str = "alternating"
    iteration: int = 0

    def __post_init__(self):
        if self.mode not in ("exact-ternary", "alternating"):
            raise ConfigError(f"unknown sign policy mode {self.mode!r}")
        if self.iteration < 0:
            raise ConfigError("iteration must be non-negative")

    def zero_fill(self) -> int:
        """Sign substituted for exact zeros ("alternating" mode only)."""
        return 1 if self.iteration % 2 == 1 else -1


def lp_mean_norm(x: np.ndarray, p: float) -> float:
    """Mean p-norm M_p(x) = (mean |x_j|^p)^(1/p).

    p = inf returns max |x_j|; p = 0 returns the p -> 0 limit, the
    geometric mean of the nonzero |x_j| (0 if all entries are zero).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ConfigError("lp_mean_norm of an empty vector")
    a = np.abs(x)
    if p == INF:
        return float(a.max())
    if p == 0:
        nz = a[a > 0]
        if nz.size == 0:
            return 0.0
        return float(np.exp(np.mean(np.log(nz))))
    if p <= 0:
        raise ConfigError(f"invalid norm order {p}")
    # Scale out the max so large p does not overflow.
    m = a.max()
    if m == 0:
        return 0.0
    return float(m * np.mean((a / m) ** p) ** (1.0 / p))


def sround(v: Union[float, np.ndarray], rng: np.random.Generator) -> np.ndarray:
    """Stochastic rounding, unbiased in expectation.

    Rounds down with probability ceil(v) - v, up otherwise, elementwise.
    """
    v = np.asarray(v, dtype=np.float64)
    lo = np.floor(v)
    frac = v - lo
    up = rng.random(v.shape) < frac
    return (lo + up).astype(np.int64)


def _log_map(x: np.ndarray, s: float) -> np.ndarray:
    return np.sign(x) * np.log1p(np.abs(x) / s)


def _log_unmap(y: np.ndarray, s: float) -> np.ndarray:
    return np.sign(y) * s * np.expm1(np.abs(y))


def quantize(x: np.ndarray, spec: QuantSpec,
             rng: np.random.Generator | None = None) -> np.ndarray:
    """Quantize a real vector to integers in [-qmax, qmax].

    Finite p:  q_i = clamp(round(qmax / (2 M_p(x)) * x_i), +-qmax).
    p = inf:   q_i = sround(qmax / max|x| * x_i)  (stochastic rounding,
               pass ``rng``; ``rounding="nearest"`` overrides for ablations).
    An all-zero input returns the all-zero vector.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ConfigError("quantize of an empty vector")
    qmax = spec.qmax

    y = x
    log_scale = None
    if spec.log_transform:
        log_scale = lp_mean_norm(x, 1.0)
        if log_scale > 0:
            y = _log_map(x, log_scale)

    m = lp_mean_norm(y, spec.norm_p)
    if m == 0 or qmax == 0:
        q = np.zeros(x.shape, dtype=np.int64)
    elif spec.norm_p == INF:
        scaled = (qmax / m) * y
        if spec.rounding == "stochastic":
            if rng is None:
                raise ConfigError("stochastic rounding needs an rng")
            q = sround(scaled, rng)
        else:
            q = np.round(scaled).astype(np.int64)
        q = np.clip(q, -qmax, qmax)
    else:
        scaled = (qmax / (2.0 * m)) * y
        if spec.rounding == "stochastic":
            if rng is None:
                raise ConfigError("stochastic rounding needs an rng")
            q = sround(scaled, rng)
        else:
            q = np.round(scaled).astype(np.int64)
        q = np.clip(q, -qmax, qmax)

    if spec.no_zero:
        fix = (q == 0) & (x != 0)
        q = np.where(fix, np.sign(x).astype(np.int64), q)
    return q


def dequantize(q: np.ndarray, spec: QuantSpec, norm: float,
               log_scale: float | None = None) -> np.ndarray:
    """Map quantized integers back to real values.

    ``norm`` is the M_p used at quantize time (of the log-mapped vector
    when log_transform is on, in which case ``log_scale`` is its M_1).
    """
    q = np.asarray(q, dtype=np.float64)
    qmax = spec.qmax
    if qmax == 0 or norm == 0:
        return np.zeros_like(q)
    if spec.norm_p == INF:
        y = q * (norm / qmax)
    else:
        y = q * (2.0 * norm / qmax)
    if spec.log_transform:
        if log_scale is None:
            raise ConfigError("dequantize of a log-transformed vector needs log_scale")
        return _log_unmap(y, log_scale)
    return y


def apply_sign(x: np.ndarray, policy: SignPolicy) -> np.ndarray:
    """Elementwise sign with zeros resolved by the policy."""
    x = np.asarray(x)
    s = np.sign(x).astype(np.int64)
    if policy.mode == "alternating":
        s = np.where(x == 0, policy.zero_fill(), s)
    return s


@dataclass(frozen=True)
class PackedBits:
    """Low-bitwidth integers packed into bytes, element 0 in the low bits.

    ``offset`` is added to each value before storing so the stored field
    is non-negative.  The one exception is width=1 with offset=1, which
    denotes the sign map {-1, +1} -> {0, 1} (a plain +1 shift cannot fit
    one bit, so the encoding is unambiguous).
    """

    width: int
    count: int
    offset: int
    payload: bytes = field(repr=False)

    HEADER = struct.Struct("<IBi")  # count, width, offset

    def to_bytes(self) -> bytes:
        return self.HEADER.pack(self.count, self.width, self.offset) + self.payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PackedBits":
        if len(raw) < cls.HEADER.size:
            raise PackFormatError(f"truncated header: {len(raw)} bytes")
        count, width, offset = cls.HEADER.unpack_from(raw)
        payload = raw[cls.HEADER.size:]
        expected = _payload_len(count, width)
        if len(payload) != expected:
            raise PackFormatError(
                f"payload is {len(payload)} bytes, expected {expected} "
                f"for count={count} width={width}"
            )
        return cls(width=width, count=count, offset=offset, payload=payload)


def _payload_len(count: int, width: int) -> int:
    return (count * width + 7) // 8


def _check_width(width: int):
    if width not in PACKABLE_WIDTHS:
        raise ConfigError(f"width must be one of {PACKABLE_WIDTHS}, got {width}")


def _is_sign_map(width: int, offset: int) -> bool:
    return width == 1 and offset == 1


def pack(values: np.ndarray, width: int, offset: int = 0) -> PackedBits:
    """Pack integers into ``width``-bit fields, low bits first within a byte."""
    _check_width(width)
    values = np.asarray(values, dtype=np.int64)
    if values.ndim != 1:
        values = values.ravel()
    if _is_sign_map(width, offset):
        bad = np.flatnonzero(np.abs(values) != 1)
        if bad.size:
            i = int(bad[0])
            raise PackRangeError(i, int(values[i]), width)
        stored = (values + 1) >> 1
    else:
        stored = values + offset
        bad = np.flatnonzero((stored < 0) | (stored > (1 << width) - 1))
        if bad.size:
            i = int(bad[0])
            raise PackRangeError(i, int(values[i]), width)
    per_byte = 8 // width
    count = stored.size
    padded = np.zeros(_payload_len(count, width) * per_byte, dtype=np.uint8)
    padded[:count] = stored.astype(np.uint8)
    lanes = padded.reshape(-1, per_byte)
    shifts = (np.arange(per_byte, dtype=np.uint32) * width).astype(np.uint32)
    packed = (lanes.astype(np.uint32) << shifts).sum(axis=1).astype(np.uint8)
    return PackedBits(width=width, count=count, offset=offset,
                      payload=packed.tobytes())


def unpack(packed: PackedBits) -> np.ndarray:
    """Exact inverse of ``pack``, offset removal included."""
    _check_width(packed.width)
    expected = _payload_len(packed.count, packed.width)
    if len(packed.payload) != expected:
        raise PackFormatError(
            f"payload is {len(packed.payload)} bytes, expected {expected}"
        )
    raw = np.frombuffer(packed.payload, dtype=np.uint8)
    per_byte = 8 // packed.width
    shifts = (np.arange(per_byte, dtype=np.uint32) * packed.width).astype(np.uint32)
    mask = (1 << packed.width) - 1
    fields = ((raw[:, None].astype(np.uint32) >> shifts) & mask).ravel()
    stored = fields[: packed.count].astype(np.int64)
    if _is_sign_map(packed.width, packed.offset):
        return stored * 2 - 1
    return stored - packed.offset
