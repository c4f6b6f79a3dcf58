"""Affine (asymmetric) quantization to signed low-bit integer codes.

A real value x in [lo, hi] maps to a b-bit signed code via

    code = clip(round(x / s - z), -2**(b-1), 2**(b-1) - 1)

with scale s = (hi - lo) / (2**b - 1) and zero-point
z = round(lo * (2**b - 1) / (hi - lo) + 2**(b-1)); dequantization
approximates x as s * (code + z). Rounding is half-to-even everywhere,
which is deterministic and bias-free.

Notes on representation:

* ``scale``, ``range_lo`` and ``range_hi`` are rounded to the nearest
  float32 at construction so that serializing them as 32-bit reals is
  lossless and model files round-trip bit-exactly.
* The zero-point is kept in a plain (wide) integer: for lo == 0 the
  formula yields exactly 2**(b-1), which does not fit a signed b-bit
  value. Codes are clipped, the zero-point is not.
* Degenerate ranges (hi == lo, e.g. a constant tensor) fall back to
  s = 1 with a zero-point chosen so the constant's code stays in range
  and integer constants round-trip exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, DomainError
from .tensor_core import Tensor

SUPPORTED_BIT_WIDTHS = (4, 6, 8)


def _round_half_even(x: float) -> int:
    # Python's round() on floats is round-half-to-even, matching np.rint.
    return int(round(x))


@dataclass(frozen=True)
class QuantParams:
    """Affine quantization parameters for one tensor or one channel slice."""

    scale: float
    zero_point: int
    bit_width: int
    range_lo: float
    range_hi: float

    def __post_init__(self):
        if self.bit_width not in SUPPORTED_BIT_WIDTHS:
            raise DomainError(f"unsupported bit width {self.bit_width}")
        if self.range_lo > self.range_hi:
            raise DomainError(f"range_lo {self.range_lo} exceeds range_hi {self.range_hi}")
        if not self.scale > 0:
            raise DomainError(f"scale must be positive, got {self.scale}")

    @property
    def code_min(self) -> int:
        return -(1 << (self.bit_width - 1))

    @property
    def code_max(self) -> int:
        return (1 << (self.bit_width - 1)) - 1


def compute_scale(lo: float, hi: float, bit_width: int) -> float:
    """Scale mapping [lo, hi] onto the b-bit code range.

    Returns the float32-rounded value of (hi - lo) / (2**b - 1); a
    degenerate range (hi == lo) falls back to 1.0 so constant tensors
    never divide by zero.
    """
    if bit_width not in SUPPORTED_BIT_WIDTHS:
        raise DomainError(f"unsupported bit width {bit_width}")
    if hi < lo:
        raise DomainError(f"invalid range [{lo}, {hi}]")
    if hi == lo:
        return 1.0
    return float(np.float32((hi - lo) / float((1 << bit_width) - 1)))


def compute_zero_point(lo: float, hi: float, bit_width: int) -> int:
    """Integer code offset aligning lo with the lowest representable code."""
    if bit_width not in SUPPORTED_BIT_WIDTHS:
        raise DomainError(f"unsupported bit width {bit_width}")
    if not hi > lo:
        raise DomainError(f"zero-point undefined for range [{lo}, {hi}]")
    levels = (1 << bit_width) - 1
    return _round_half_even(lo * levels / (hi - lo) + float(1 << (bit_width - 1)))


def params_from_range(lo: float, hi: float, bit_width: int) -> QuantParams:
    """Build QuantParams from observed range endpoints.

    Endpoints are snapped to float32 (the storage precision) before the
    scale and zero-point are derived, so parameters rebuilt from a saved
    model are identical to the originals.
    """
    if hi < lo:
        raise DomainError(f"invalid range [{lo}, {hi}]")
    lo = float(np.float32(lo))
    hi = float(np.float32(hi))
    if hi == lo:
        # Constant tensor: keep s = 1 and pick a zero-point that leaves the
        # constant's own code inside the representable range (clamped with a
        # margin of one code to absorb rounding of half-fractions).
        code_lo = -(1 << (bit_width - 1))
        code_hi = (1 << (bit_width - 1)) - 1
        z = _round_half_even(-lo)
        anchor = _round_half_even(lo)
        z = min(max(z, anchor - code_hi + 1), anchor - code_lo - 1)
        return QuantParams(scale=1.0, zero_point=z, bit_width=bit_width,
                           range_lo=lo, range_hi=hi)
    return QuantParams(
        scale=compute_scale(lo, hi, bit_width),
        zero_point=compute_zero_point(lo, hi, bit_width),
        bit_width=bit_width,
        range_lo=lo,
        range_hi=hi,
    )


@dataclass(frozen=True)
class QuantizedTensor:
    """Integer codes plus the parameters that produced them.

    ``params`` is a single QuantParams (per-tensor) or a tuple with one
    entry per slice along ``channel_axis`` (per-channel).
    """

    codes: np.ndarray
    shape: tuple[int, ...]
    params: QuantParams | tuple[QuantParams, ...]
    channel_axis: int | None = None

    def __post_init__(self):
        codes = np.ascontiguousarray(self.codes, dtype=np.int32)
        codes.flags.writeable = False
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "shape", tuple(self.shape))
        if codes.shape != self.shape:
            raise DimensionError(f"codes shape {codes.shape} != declared {self.shape}")
        if isinstance(self.params, QuantParams):
            if self.channel_axis is not None:
                raise DimensionError("per-tensor codes must not carry a channel axis")
            plist = [self.params]
        else:
            object.__setattr__(self, "params", tuple(self.params))
            if self.channel_axis is None or not 0 <= self.channel_axis < len(self.shape):
                raise DimensionError(f"invalid channel axis {self.channel_axis} for shape {self.shape}")
            if len(self.params) != self.shape[self.channel_axis]:
                raise DimensionError(
                    f"{len(self.params)} channel params for {self.shape[self.channel_axis]} slices")
            plist = list(self.params)
        lo = min(p.code_min for p in plist)
        hi = max(p.code_max for p in plist)
        if codes.size and (codes.min() < lo or codes.max() > hi):
            raise DomainError("codes outside the representable range")

    @property
    def bit_width(self) -> int:
        p = self.params if isinstance(self.params, QuantParams) else self.params[0]
        return p.bit_width


def _param_arrays(q_shape: tuple[int, ...],
                  params: QuantParams | Sequence[QuantParams],
                  channel_axis: int | None):
    """Broadcastable float64 scale / zero-point arrays plus code bounds."""
    if isinstance(params, QuantParams):
        return (np.float64(params.scale), np.float64(params.zero_point),
                params.code_min, params.code_max)
    plist = list(params)
    if channel_axis is None or not 0 <= channel_axis < len(q_shape):
        raise DimensionError(f"invalid channel axis {channel_axis} for shape {q_shape}")
    if len(plist) != q_shape[channel_axis]:
        raise DimensionError(f"{len(plist)} channel params for axis of size {q_shape[channel_axis]}")
    bits = plist[0].bit_width
    if any(p.bit_width != bits for p in plist):
        raise DomainError("mixed bit widths across channels")
    bshape = [1] * len(q_shape)
    bshape[channel_axis] = len(plist)
    s = np.array([p.scale for p in plist], dtype=np.float64).reshape(bshape)
    z = np.array([p.zero_point for p in plist], dtype=np.float64).reshape(bshape)
    return s, z, plist[0].code_min, plist[0].code_max


def quantize(x: Tensor,
             params: QuantParams | Sequence[QuantParams],
             channel_axis: int | None = None) -> QuantizedTensor:
    """Map a real tensor to integer codes; out-of-range values saturate."""
    s, z, code_min, code_max = _param_arrays(x.shape, params, channel_axis)
    t = np.rint(x.data.astype(np.float64) / s - z)
    codes = np.clip(t, code_min, code_max).astype(np.int32)
    p = params if isinstance(params, QuantParams) else tuple(params)
    return QuantizedTensor(codes=codes, shape=x.shape, params=p,
                           channel_axis=None if isinstance(p, QuantParams) else channel_axis)


def dequantize(q: QuantizedTensor) -> Tensor:
    """Approximate the real values of quantized codes: x ~= s * (code + z)."""
    s, z, _, _ = _param_arrays(q.shape, q.params, q.channel_axis)
    return Tensor._wrap((s * (q.codes.astype(np.float64) + z)).astype(np.float32))


def derive_params(t: Tensor, bit_width: int,
                  channel_axis: int | None = None) -> QuantParams | list[QuantParams]:
    """Quantization parameters from tensor extrema.

    With ``channel_axis`` set, each slice along that axis gets its own
    parameters from the slice's extrema (per-channel granularity);
    otherwise one set of parameters covers the whole tensor.
    """
    if t.size == 0:
        raise DomainError("cannot derive parameters for an empty tensor")
    if channel_axis is None:
        lo = float(t.data.min())
        hi = float(t.data.max())
        return params_from_range(lo, hi, bit_width)
    if not 0 <= channel_axis < t.rank:
        raise DimensionError(f"axis {channel_axis} out of range for rank {t.rank}")
    reduce_axes = tuple(a for a in range(t.rank) if a != channel_axis)
    los = t.data.min(axis=reduce_axes)
    his = t.data.max(axis=reduce_axes)
    return [params_from_range(float(lo), float(hi), bit_width) for lo, hi in zip(los, his)]


class RangeObserver:
    """Running min/max of every tensor fed through ``update``.

    Plain extrema (no moving average); mutating, so confine each observer
    to a single updater.
    """

    __slots__ = ("running_lo", "running_hi", "count")

    def __init__(self):
        self.running_lo = float("inf")
        self.running_hi = float("-inf")
        self.count = 0

    def update(self, t: Tensor) -> "RangeObserver":
        if t.size == 0:
            raise DomainError("cannot observe an empty tensor")
        self.running_lo = min(self.running_lo, float(t.data.min()))
        self.running_hi = max(self.running_hi, float(t.data.max()))
        self.count += 1
        return self

    def freeze(self, bit_width: int) -> QuantParams:
        """Snapshot the observed range into fixed QuantParams."""
        if self.count == 0:
            from .errors import StateError

            raise StateError("observer has seen no data; range is undefined")
        return params_from_range(self.running_lo, self.running_hi, bit_width)


def observer_update(o: RangeObserver, t: Tensor) -> RangeObserver:
    """Functional alias for RangeObserver.update."""
    return o.update(t)
