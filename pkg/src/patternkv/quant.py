"""Asymmetric low-bit group quantization with bit-packed codes.

A group is a 1-D slice of cache values that shares one (scale, zero_point)
pair: for keys a group spans consecutive tokens within one channel, for
values it spans the channels of one token. Codes are unsigned n-bit
integers packed little-endian, first code in the lowest-order bits.
All arithmetic runs in float64 regardless of the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, UsageError

SUPPORTED_BITS = (2, 4, 8)

# Grouping-axis tags. Keys quantize along tokens within a channel,
# values across the channels of a single token.
PER_CHANNEL = "per-channel"
PER_TOKEN = "per-token"
_LAYOUTS = (PER_CHANNEL, PER_TOKEN)


@dataclass(frozen=True)
class QuantParams:
    """Affine parameters of one quantized group.

    Attributes:
        scale: Step size (max - min) / (2^bits - 1); zero for a
            constant group.
        zero_point: Group minimum; dequantized value of code 0.
        bits: Code width, one of SUPPORTED_BITS.
    """

    scale: float
    zero_point: float
    bits: int


@dataclass(frozen=True)
class QuantizedGroup:
    """One encoded group: parameters plus bit-packed codes.

    Attributes:
        params: Affine parameters shared by every element.
        codes: Packed code bytes, ceil(length * bits / 8) of them.
        length: Number of encoded elements.
        layout: Grouping axis, PER_CHANNEL or PER_TOKEN.
    """

    params: QuantParams
    codes: bytes
    length: int
    layout: str


def _check_bits(bits: int) -> None:
    if bits not in SUPPORTED_BITS:
        raise UsageError(f"unsupported bit width {bits}; expected one of {SUPPORTED_BITS}")


def _check_layout(layout: str) -> None:
    if layout not in _LAYOUTS:
        raise UsageError(f"unknown layout {layout!r}; expected one of {_LAYOUTS}")


def quantize_group(values: np.ndarray, bits: int, layout: str = PER_TOKEN) -> QuantizedGroup:
    """Encode one group of finite reals as n-bit codes.

    The zero point is the group minimum and the scale divides the full
    range into 2^bits - 1 steps, so both endpoints are exactly
    representable. Ties in code assignment round half away from zero.

    Args:
        values: 1-D array-like of finite floats, at least one element.
        bits: Code width, one of SUPPORTED_BITS.
        layout: Grouping-axis tag recorded on the result.

    Returns:
        A QuantizedGroup with packed codes.

    Raises:
        UsageError: Empty input, bad bit width, or bad layout.
        DataError: A non-finite element, reported by index.
    """
    _check_bits(bits)
    _check_layout(layout)
    vals = np.asarray(values, dtype=np.float64).ravel()
    if vals.size == 0:
        raise UsageError("cannot quantize an empty group")
    finite = np.isfinite(vals)
    if not finite.all():
        idx = int(np.flatnonzero(~finite)[0])
        raise DataError(f"non-finite value at index {idx}: {vals[idx]}")

    lo = float(vals.min())
    hi = float(vals.max())
    qmax = (1 << bits) - 1
    scale = (hi - lo) / qmax
    if scale == 0.0:
        codes = np.zeros(vals.size, dtype=np.uint8)
    else:
        # floor(x + 0.5) rounds half away from zero for the non-negative
        # quotients produced here (vals >= lo).
        codes = np.floor((vals - lo) / scale + 0.5)
        codes = np.clip(codes, 0, qmax).astype(np.uint8)
    params = QuantParams(scale=scale, zero_point=lo, bits=bits)
    return QuantizedGroup(params=params, codes=pack_codes(codes, bits), length=vals.size, layout=layout)


def dequantize_group(group: QuantizedGroup) -> np.ndarray:
    """Decode a group back to float64 values scale * code + zero_point."""
    codes = unpack_codes(group.codes, group.length, group.params.bits)
    return group.params.scale * codes.astype(np.float64) + group.params.zero_point


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Pack n-bit codes into bytes, first code in the lowest-order bits.

    Args:
        codes: 1-D array-like of unsigned ints, each < 2^bits.
        bits: Code width, one of SUPPORTED_BITS.

    Returns:
        ceil(len(codes) * bits / 8) bytes; empty input packs to b"".

    Raises:
        UsageError: Bad bit width or a code out of range.
    """
    _check_bits(bits)
    arr = np.asarray(codes, dtype=np.int64).ravel()
    if arr.size == 0:
        return b""
    qmax = (1 << bits) - 1
    if arr.min() < 0 or arr.max() > qmax:
        bad = int(np.flatnonzero((arr < 0) | (arr > qmax))[0])
        raise UsageError(f"code {arr[bad]} at index {bad} does not fit in {bits} bits")
    per_byte = 8 // bits
    padded = np.zeros(-(-arr.size // per_byte) * per_byte, dtype=np.uint16)
    padded[: arr.size] = arr
    shifts = np.arange(per_byte, dtype=np.uint16) * bits
    packed = np.bitwise_or.reduce(padded.reshape(-1, per_byte) << shifts, axis=1)
    return packed.astype(np.uint8).tobytes()


def unpack_codes(data: bytes, length: int, bits: int) -> np.ndarray:
    """Invert pack_codes.

    Args:
        data: Packed bytes.
        length: Number of codes to recover.
        bits: Code width, one of SUPPORTED_BITS.

    Returns:
        uint8 array of exactly `length` codes.

    Raises:
        UsageError: Bad bit width or negative length.
        DataError: data has the wrong byte count for (length, bits).
    """
    _check_bits(bits)
    if length < 0:
        raise UsageError(f"negative code count {length}")
    expected = (length * bits + 7) // 8
    if len(data) != expected:
        raise DataError(
            f"packed payload is {len(data)} bytes, expected {expected} for {length} codes of {bits} bits"
        )
    if length == 0:
        return np.zeros(0, dtype=np.uint8)
    per_byte = 8 // bits
    raw = np.frombuffer(data, dtype=np.uint8)
    shifts = np.arange(per_byte, dtype=np.uint8) * bits
    mask = (1 << bits) - 1
    codes = (raw[:, None] >> shifts) & mask
    return codes.reshape(-1)[:length].astype(np.uint8)
