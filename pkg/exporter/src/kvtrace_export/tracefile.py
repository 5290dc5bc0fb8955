"""Binary KV trace files: capture container, writer, reader, validator.

File layout (all little-endian, tightly packed):

    header:
        magic      4 bytes  b"KVTR"
        version    u32      currently 1
        num_layers u32
        num_heads  u32      KV heads per layer
        head_dim   u32
        dtype      u8       1 = float16, 2 = float32
        prefill    u32      prompt tokens, >= 1
        steps      u32      decode steps, >= 0

    body (element dtype from the header, row-major):
        for each layer:  K[num_heads, prefill, head_dim]
                         V[num_heads, prefill, head_dim]
        for each step:
            for each layer:  K[num_heads, 1, head_dim]
                             V[num_heads, 1, head_dim]

The writer stages the whole payload in memory and publishes it with an
atomic rename, so a crashed or out-of-memory export never leaves a
partial file behind.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, UsageError

TRACE_MAGIC = b"KVTR"
TRACE_VERSION = 1
_HEADER_FMT = "<4sIIIIBII"
HEADER_SIZE = struct.calcsize(_HEADER_FMT)

_DTYPE_CODES = {"float16": 1, "float32": 2}
_DTYPE_NP = {1: np.dtype("<f2"), 2: np.dtype("<f4")}


@dataclass
class CapturedKv:
    """Per-layer K/V matrices for one generation run.

    Args:
        keys: One (num_heads, total_tokens, head_dim) array per layer,
            keys as stored by the attention cache (post-rotation).
        values: Same shapes, cached value vectors.
        prefill_len: How many leading tokens belong to the prompt; the
            rest are single-token decode steps.
    """

    keys: list[np.ndarray]
    values: list[np.ndarray]
    prefill_len: int

    def __post_init__(self) -> None:
        if not self.keys or len(self.keys) != len(self.values):
            raise UsageError("keys and values must hold one array per layer")
        shape = self.keys[0].shape
        for arr in (*self.keys, *self.values):
            if arr.ndim != 3 or arr.shape != shape:
                raise UsageError("every layer must share one (heads, tokens, dim) shape")
        if not 1 <= self.prefill_len <= shape[1]:
            raise UsageError(f"prefill_len {self.prefill_len} outside [1, {shape[1]}]")

    @property
    def num_layers(self) -> int:
        return len(self.keys)

    @property
    def num_heads(self) -> int:
        return self.keys[0].shape[0]

    @property
    def total_tokens(self) -> int:
        return self.keys[0].shape[1]

    @property
    def head_dim(self) -> int:
        return self.keys[0].shape[2]

    @property
    def decode_steps(self) -> int:
        return self.total_tokens - self.prefill_len


def _body_bytes(layers: int, heads: int, dim: int, tokens: int, dtype_code: int) -> int:
    return 2 * layers * heads * dim * tokens * _DTYPE_NP[dtype_code].itemsize


def write_trace_file(path: str, capture: CapturedKv, dtype: str = "float32") -> int:
    """Serialize a capture, returning the byte count written.

    The payload is assembled fully in memory and moved into place with
    os.replace; failures remove the temporary file.
    """
    if dtype not in _DTYPE_CODES:
        raise UsageError(f"dtype must be one of {sorted(_DTYPE_CODES)}, got {dtype!r}")
    code = _DTYPE_CODES[dtype]
    np_dtype = _DTYPE_NP[code]
    p = capture.prefill_len
    header = struct.pack(
        _HEADER_FMT,
        TRACE_MAGIC,
        TRACE_VERSION,
        capture.num_layers,
        capture.num_heads,
        capture.head_dim,
        code,
        p,
        capture.decode_steps,
    )
    chunks = [header]
    for k, v in zip(capture.keys, capture.values):
        chunks.append(np.ascontiguousarray(k[:, :p], dtype=np_dtype).tobytes())
        chunks.append(np.ascontiguousarray(v[:, :p], dtype=np_dtype).tobytes())
    for step in range(p, capture.total_tokens):
        for k, v in zip(capture.keys, capture.values):
            chunks.append(np.ascontiguousarray(k[:, step : step + 1], dtype=np_dtype).tobytes())
            chunks.append(np.ascontiguousarray(v[:, step : step + 1], dtype=np_dtype).tobytes())
    blob = b"".join(chunks)

    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    return len(blob)


@dataclass(frozen=True)
class TraceInfo:
    num_layers: int
    num_heads: int
    head_dim: int
    dtype_code: int
    prefill_len: int
    decode_steps: int


def read_trace_file(path: str) -> tuple[TraceInfo, CapturedKv]:
    """Parse a trace back into per-layer matrices, widened to float64.

    Raises:
        DataError: On any header or body inconsistency, with the byte
            offset (or tensor coordinates) of the problem.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < HEADER_SIZE:
        raise DataError(f"file holds {len(blob)} bytes, shorter than the {HEADER_SIZE}-byte header")
    magic, version, layers, heads, dim, code, prefill, steps = struct.unpack_from(_HEADER_FMT, blob)
    if magic != TRACE_MAGIC:
        raise DataError(f"bad magic {magic!r} at offset 0")
    if version != TRACE_VERSION:
        raise DataError(f"version {version} at offset 4; expected {TRACE_VERSION}")
    if layers < 1 or heads < 1 or dim < 1:
        raise DataError("zero layer/head/dim count at offset 8")
    if code not in _DTYPE_NP:
        raise DataError(f"unknown dtype code {code} at offset 20")
    if prefill < 1:
        raise DataError("prefill length 0 at offset 21")

    tokens = prefill + steps
    expected = _body_bytes(layers, heads, dim, tokens, code)
    actual = len(blob) - HEADER_SIZE
    if actual != expected:
        raise DataError(
            f"body ends at offset {len(blob)}; header implies {HEADER_SIZE + expected} bytes"
        )

    flat = np.frombuffer(blob, dtype=_DTYPE_NP[code], offset=HEADER_SIZE).astype(np.float64)
    keys = [np.empty((heads, tokens, dim)) for _ in range(layers)]
    values = [np.empty((heads, tokens, dim)) for _ in range(layers)]
    per_slice = heads * dim
    pos = 0
    for layer in range(layers):
        n = heads * prefill * dim
        keys[layer][:, :prefill] = flat[pos : pos + n].reshape(heads, prefill, dim)
        pos += n
        values[layer][:, :prefill] = flat[pos : pos + n].reshape(heads, prefill, dim)
        pos += n
    for step in range(steps):
        token = prefill + step
        for layer in range(layers):
            keys[layer][:, token] = flat[pos : pos + per_slice].reshape(heads, dim)
            pos += per_slice
            values[layer][:, token] = flat[pos : pos + per_slice].reshape(heads, dim)
            pos += per_slice
    info = TraceInfo(layers, heads, dim, code, prefill, steps)
    return info, CapturedKv(keys=keys, values=values, prefill_len=prefill)


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of validate_trace: ok flag plus a human-readable reason."""

    ok: bool
    message: str


def _first_nonfinite(capture: CapturedKv) -> str | None:
    """First bad value in file order, as a located message."""
    p = capture.prefill_len
    for layer in range(capture.num_layers):
        for side, arr in (("K", capture.keys[layer]), ("V", capture.values[layer])):
            bad = np.argwhere(~np.isfinite(arr[:, :p]))
            if len(bad):
                h, t, d = bad[0]
                return f"non-finite prefill {side} value at layer {layer}, head {h}, token {t}, dim {d}"
    for step in range(capture.decode_steps):
        token = p + step
        for layer in range(capture.num_layers):
            for side, arr in (("K", capture.keys[layer]), ("V", capture.values[layer])):
                bad = np.argwhere(~np.isfinite(arr[:, token]))
                if len(bad):
                    h, d = bad[0]
                    return f"non-finite decode {side} value at step {step}, layer {layer}, head {h}, dim {d}"
    return None


def validate_trace(path: str) -> ValidationReport:
    """Re-read a trace and verify structure and finiteness.

    Never raises on bad content; the report carries the first failure
    location instead.
    """
    try:
        info, capture = read_trace_file(path)
    except OSError as exc:
        return ValidationReport(ok=False, message=str(exc))
    except DataError as exc:
        return ValidationReport(ok=False, message=str(exc))
    problem = _first_nonfinite(capture)
    if problem is not None:
        return ValidationReport(ok=False, message=problem)
    return ValidationReport(
        ok=True,
        message=(
            f"ok: {info.num_layers} layers, {info.num_heads} heads, head_dim {info.head_dim}, "
            f"prefill {info.prefill_len}, decode steps {info.decode_steps}"
        ),
    )
