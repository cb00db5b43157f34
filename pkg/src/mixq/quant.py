"""Uniform affine and generalized-log quantizers.

Codes always live in ``[0, 2**bits - 1]``. Per-channel parameters are laid
out along the last axis of the tensor being quantized.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

LOG_OFFSET_FLOOR = 1e-8


class Kind(str, enum.Enum):
    UNIFORM = "uniform_affine"
    LOG = "log_base"


class Granularity(str, enum.Enum):
    PER_TENSOR = "per_tensor"
    PER_CHANNEL = "per_channel"


@dataclass(frozen=True)
class QuantScheme:
    kind: Kind = Kind.UNIFORM
    granularity: Granularity = Granularity.PER_TENSOR
    base: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        if self.kind is Kind.LOG:
            if self.base is None or not self.base > 1.0:
                raise ValueError(f"log quantizer needs base > 1, got {self.base}")


@dataclass
class QuantParams:
    scheme: QuantScheme
    bits: int
    scale: np.ndarray
    zero_point: np.ndarray
    offset: np.ndarray = field(default_factory=lambda: np.zeros(()))
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros((), dtype=bool))

    def __post_init__(self):
        if not 1 <= int(self.bits) <= 8:
            raise ValueError(f"bits must be in [1, 8], got {self.bits}")
        self.bits = int(self.bits)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.zero_point = np.asarray(self.zero_point, dtype=np.int64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        self.degenerate = np.asarray(self.degenerate, dtype=bool)
        if np.any(self.scale <= 0) or not np.all(np.isfinite(self.scale)):
            raise ValueError("scale must be finite and positive")
        if np.any(self.zero_point < 0) or np.any(self.zero_point > self.qmax):
            raise ValueError("zero point outside the code range")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    def to_dict(self) -> dict:
        """Scalars stay scalars; per-channel fields become lists. Reals use ``repr``."""
        def real(a):
            return repr(float(a)) if a.ndim == 0 else [repr(float(v)) for v in a]

        def plain(a, cast):
            return cast(a) if a.ndim == 0 else [cast(v) for v in a]

        return {
            "kind": self.scheme.kind.value,
            "granularity": self.scheme.granularity.value,
            "base": None if self.scheme.base is None else repr(float(self.scheme.base)),
            "bits": self.bits,
            "scale": real(self.scale),
            "zero_point": plain(self.zero_point, int),
            "offset": real(self.offset),
            "degenerate": plain(self.degenerate, bool),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        def real(v):
            return np.asarray([float(x) for x in v] if isinstance(v, list) else float(v))

        base = None if d["base"] is None else float(d["base"])
        return cls(
            scheme=QuantScheme(Kind(d["kind"]), Granularity(d["granularity"]), base),
            bits=d["bits"],
            scale=real(d["scale"]),
            zero_point=np.asarray(d["zero_point"]),
            offset=real(d["offset"]),
            degenerate=np.asarray(d.get("degenerate", False)),
        )


def round_half_away(x):
    """Round to nearest integer, ties away from zero. Float inputs keep their dtype."""
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    if x.ndim == 0:
        return round_half_away(x.reshape(1)).reshape(())
    out = np.rint(x)
    # rint breaks ties to even; move exact ties away from zero instead
    gap = x - out
    np.abs(gap, out=gap)
    tie = gap == 0.5
    if tie.any():
        out[tie] = x[tie] + np.copysign(0.5, x[tie])
    return out


class CalibrationStats:
    """Per-channel order statistics of calibration samples.

    ``samples`` is any array whose last axis indexes channels; all leading
    axes are pooled. ``per_tensor()`` collapses everything into one channel.
    """

    def __init__(self, samples):
        arr = np.asarray(samples, dtype=np.float64)
        if arr.size == 0:
            raise ValueError("empty calibration sample")
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        self._sorted = np.sort(arr.reshape(-1, arr.shape[-1]), axis=0)

    @classmethod
    def from_sorted(cls, sorted_columns: np.ndarray) -> "CalibrationStats":
        obj = cls.__new__(cls)
        obj._sorted = np.asarray(sorted_columns, dtype=np.float64)
        return obj

    @property
    def channels(self) -> int:
        return self._sorted.shape[1]

    @property
    def min(self) -> np.ndarray:
        return self._sorted[0]

    @property
    def max(self) -> np.ndarray:
        return self._sorted[-1]

    def samples(self) -> np.ndarray:
        """All pooled values (sorted per channel), flattened."""
        return self._sorted.reshape(-1)

    def quantile(self, q: float) -> np.ndarray:
        if q <= 0.0:
            return self.min.copy()
        if q >= 1.0:
            return self.max.copy()
        return np.quantile(self._sorted, q, axis=0)

    def per_tensor(self) -> "CalibrationStats":
        if self.channels == 1:
            return self
        return CalibrationStats.from_sorted(np.sort(self._sorted.reshape(-1))[:, None])


def calibrate_uniform(stats: CalibrationStats, bits: int,
                      granularity=Granularity.PER_TENSOR,
                      percentile: float = 1.0) -> QuantParams:
    if not 0.5 < percentile <= 1.0:
        raise ValueError(f"percentile must lie in (0.5, 1], got {percentile}")
    granularity = Granularity(granularity)
    if granularity is Granularity.PER_TENSOR:
        stats = stats.per_tensor()
    qmax = (1 << bits) - 1
    lo = stats.quantile(1.0 - percentile)
    hi = stats.quantile(percentile)
    degenerate = ~(hi > lo)
    span = np.where(degenerate, 1.0, hi - lo)
    scale = np.where(degenerate, 1.0, span / qmax)
    zp = np.clip(round_half_away(-lo / scale), 0, qmax)
    zp = np.where(degenerate, 0, zp)
    if granularity is Granularity.PER_TENSOR:
        scale, zp, degenerate = scale[0], zp[0], degenerate[0]
    return QuantParams(QuantScheme(Kind.UNIFORM, granularity), bits,
                       scale, zp.astype(np.int64), degenerate=degenerate)


def quantize_uniform(x, params: QuantParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    codes = round_half_away(x / params.scale)
    codes += params.zero_point
    np.clip(codes, 0, params.qmax, out=codes)
    return codes.astype(np.int64)


def dequantize_uniform(codes, params: QuantParams) -> np.ndarray:
    return params.scale * (np.asarray(codes, dtype=np.float64) - params.zero_point)


def calibrate_log(stats: CalibrationStats, bits: int, base: float,
                  granularity=Granularity.PER_TENSOR) -> QuantParams:
    """Fit scale and offset so that calibration data maps into ``(0, 1]``."""
    scheme = QuantScheme(Kind.LOG, granularity, float(base))
    if scheme.granularity is Granularity.PER_TENSOR:
        stats = stats.per_tensor()
    lo, hi = stats.min, stats.max
    offset = np.where(lo < 0, -lo + LOG_OFFSET_FLOOR, 0.0)
    top = hi + offset
    degenerate = ~(top > 0)
    scale = np.where(degenerate, 1.0, top)
    zero = np.zeros(scale.shape, dtype=np.int64)
    if scheme.granularity is Granularity.PER_TENSOR:
        scale, offset, degenerate, zero = scale[0], offset[0], degenerate[0], zero[0]
    return QuantParams(scheme, bits, scale, zero, offset=offset, degenerate=degenerate)


def quantize_log(x, params: QuantParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        return quantize_log(x.reshape(1), params).reshape(())
    ratio = (x + params.offset) / params.scale
    deepest = params.qmax + 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        level = np.log(ratio)
    level *= -1.0 / math.log(params.scheme.base)
    # non-positive arguments (log -> nan/-inf, level -> nan/+inf) land in the deepest bin
    np.nan_to_num(level, copy=False, nan=deepest, posinf=deepest, neginf=-1.0)
    np.clip(level, -1.0, deepest, out=level)
    codes = round_half_away(level)
    np.clip(codes, 0, params.qmax, out=codes)
    return codes.astype(np.int64)


def _powers(base: float, qmax: int) -> np.ndarray:
    # libm pow, so every level equals the scalar expression base ** -k bit for bit
    return np.array([math.pow(base, -k) for k in range(qmax + 1)])


def dequantize_log(codes, params: QuantParams) -> np.ndarray:
    codes = np.asarray(codes).astype(np.int64)
    powers = _powers(params.scheme.base, params.qmax)
    if params.scale.ndim == 0 and params.offset.ndim == 0:
        table = params.scale * powers - params.offset
        return table[codes]
    return params.scale * powers[codes] - params.offset


def quantize(x, params: QuantParams) -> np.ndarray:
    if params.scheme.kind is Kind.LOG:
        return quantize_log(x, params)
    return quantize_uniform(x, params)


def dequantize(codes, params: QuantParams) -> np.ndarray:
    if params.scheme.kind is Kind.LOG:
        return dequantize_log(codes, params)
    return dequantize_uniform(codes, params)


def fake_quant(x, params: QuantParams) -> np.ndarray:
    """Quantize then dequantize; the result keeps the dtype of ``x``.

    Arithmetic runs in the input precision, so float32 activations never
    round-trip through float64.
    """
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    if x.ndim == 0:
        return fake_quant(x.reshape(1), params).reshape(())
    dt = x.dtype
    if params.scheme.kind is Kind.LOG:
        ratio = x + params.offset.astype(dt)
        ratio /= params.scale.astype(dt)
        deepest = params.qmax + 1.0
        with np.errstate(divide="ignore", invalid="ignore"):
            level = np.log(ratio, out=ratio)
        level *= dt.type(-1.0 / math.log(params.scheme.base))
        np.nan_to_num(level, copy=False, nan=deepest, posinf=deepest, neginf=-1.0)
        np.clip(level, -1.0, deepest, out=level)
        codes = round_half_away(level)
        np.clip(codes, 0, params.qmax, out=codes)
        if params.scale.ndim == 0 and params.offset.ndim == 0:
            return log_support(params).astype(dt)[codes.astype(np.intp)]
        return dequantize_log(codes, params).astype(dt, copy=False)
    scale = params.scale.astype(dt)
    zp = params.zero_point.astype(dt)
    codes = round_half_away(x / scale)
    codes += zp
    np.clip(codes, 0, params.qmax, out=codes)
    codes -= zp
    codes *= scale
    return codes


def log_support(params: QuantParams) -> np.ndarray:
    """All values a log quantizer can emit, ordered by code."""
    return dequantize_log(np.arange(params.qmax + 1), params)


def search_adaptive_base(samples, bits: int, grid) -> float:
    """Pick the grid base with the lowest fake-quant MSE on ``samples``.

    Ties go to the larger base.
    """
    grid = [float(a) for a in grid]
    if not grid:
        raise ValueError("empty base grid")
    stats = CalibrationStats(np.ravel(samples))
    x = np.ravel(np.asarray(samples, dtype=np.float64))
    best_base, best_err = None, math.inf
    for a in sorted(grid):
        params = calibrate_log(stats, bits, a)
        err = float(np.mean((fake_quant(x, params) - x) ** 2))
        if err <= best_err:
            best_base, best_err = a, err
    return best_base
