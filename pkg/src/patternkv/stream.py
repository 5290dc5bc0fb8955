"""KV stream container and the binary trace interchange format.

A trace file carries per-layer, per-head key and value vectors split
into a prefill phase and single-token decode steps:

    header (little-endian, packed):
        magic      4 bytes  b"KVTR"
        version    u32      currently 1
        num_layers u32
        num_heads  u32      KV heads per layer
        head_dim   u32
        dtype      u8       1 = float16, 2 = float32
        prefill    u32      prefill length in tokens, >= 1
        steps      u32      decode steps, >= 0

    body (same element dtype, little-endian, row-major):
        for each layer:  K[num_heads, prefill, head_dim]
                         V[num_heads, prefill, head_dim]
        for each step:
            for each layer:  K[num_heads, 1, head_dim]
                             V[num_heads, 1, head_dim]

The body length must match the header exactly. Payloads are widened to
float64 on load.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, UsageError

TRACE_MAGIC = b"KVTR"
TRACE_VERSION = 1
_HEADER_FMT = "<4sIIIIBII"
HEADER_SIZE = struct.calcsize(_HEADER_FMT)

DTYPE_F16 = 1
DTYPE_F32 = 2
_DTYPE_NP = {DTYPE_F16: np.dtype("<f2"), DTYPE_F32: np.dtype("<f4")}
_DTYPE_NAMES = {DTYPE_F16: "float16", DTYPE_F32: "float32"}


@dataclass(frozen=True)
class TraceHeader:
    num_layers: int
    num_heads: int
    head_dim: int
    dtype_code: int
    prefill_len: int
    decode_steps: int

    @property
    def dtype_name(self) -> str:
        return _DTYPE_NAMES.get(self.dtype_code, f"unknown({self.dtype_code})")

    @property
    def body_bytes(self) -> int:
        per = _DTYPE_NP[self.dtype_code].itemsize
        elems = 2 * self.num_layers * self.num_heads * self.head_dim * (self.prefill_len + self.decode_steps)
        return elems * per


@dataclass
class KvStream:
    """In-memory KV stream: prefill tensors plus per-step decode tensors.

    Shapes: prefill_k/prefill_v are (layers, heads, prefill_len, head_dim),
    decode_k/decode_v are (layers, heads, decode_steps, head_dim). The
    optional token_ids (prefill_len + decode_steps,) and v_cluster_ids
    (layers, heads, prefill_len + decode_steps) are synthetic-generator
    metadata and never serialized.
    """

    prefill_k: np.ndarray
    prefill_v: np.ndarray
    decode_k: np.ndarray
    decode_v: np.ndarray
    token_ids: np.ndarray | None = None
    v_cluster_ids: np.ndarray | None = None

    def __post_init__(self) -> None:
        pk, pv, dk, dv = self.prefill_k, self.prefill_v, self.decode_k, self.decode_v
        if pk.ndim != 4 or pv.shape != pk.shape:
            raise UsageError("prefill tensors must share one (layers, heads, tokens, dim) shape")
        if dk.ndim != 4 or dv.shape != dk.shape:
            raise UsageError("decode tensors must share one (layers, heads, steps, dim) shape")
        if dk.shape[0] != pk.shape[0] or dk.shape[1] != pk.shape[1] or dk.shape[3] != pk.shape[3]:
            raise UsageError("decode tensors must match prefill layers/heads/dim")
        if pk.shape[2] < 1:
            raise UsageError("prefill must hold at least one token")

    @property
    def num_layers(self) -> int:
        return self.prefill_k.shape[0]

    @property
    def num_heads(self) -> int:
        return self.prefill_k.shape[1]

    @property
    def prefill_len(self) -> int:
        return self.prefill_k.shape[2]

    @property
    def decode_steps(self) -> int:
        return self.decode_k.shape[2]

    @property
    def head_dim(self) -> int:
        return self.prefill_k.shape[3]

    def head_slices(self, layer: int, head: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(prefill K, prefill V, decode K, decode V) for one head."""
        return (
            self.prefill_k[layer, head],
            self.prefill_v[layer, head],
            self.decode_k[layer, head],
            self.decode_v[layer, head],
        )


def write_trace(path: str, stream: KvStream, dtype_code: int = DTYPE_F32) -> None:
    """Serialize a stream to the binary trace format."""
    if dtype_code not in _DTYPE_NP:
        raise UsageError(f"unknown trace dtype code {dtype_code}")
    np_dtype = _DTYPE_NP[dtype_code]
    header = struct.pack(
        _HEADER_FMT,
        TRACE_MAGIC,
        TRACE_VERSION,
        stream.num_layers,
        stream.num_heads,
        stream.head_dim,
        dtype_code,
        stream.prefill_len,
        stream.decode_steps,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for layer in range(stream.num_layers):
            fh.write(np.ascontiguousarray(stream.prefill_k[layer], dtype=np_dtype).tobytes())
            fh.write(np.ascontiguousarray(stream.prefill_v[layer], dtype=np_dtype).tobytes())
        for step in range(stream.decode_steps):
            for layer in range(stream.num_layers):
                fh.write(np.ascontiguousarray(stream.decode_k[layer, :, step : step + 1], dtype=np_dtype).tobytes())
                fh.write(np.ascontiguousarray(stream.decode_v[layer, :, step : step + 1], dtype=np_dtype).tobytes())


def read_trace_header(path: str) -> TraceHeader:
    """Parse and validate only the fixed-size header."""
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
    return _parse_header(raw, len(raw))


def _parse_header(raw: bytes, file_size: int) -> TraceHeader:
    if len(raw) < HEADER_SIZE:
        raise DataError(f"trace truncated inside the header: file ends at byte offset {file_size}, header needs {HEADER_SIZE}")
    magic, version, layers, heads, dim, dtype_code, prefill, steps = struct.unpack(_HEADER_FMT, raw[:HEADER_SIZE])
    if magic != TRACE_MAGIC:
        raise DataError(f"bad magic {magic!r} at byte offset 0, expected {TRACE_MAGIC!r}")
    if version != TRACE_VERSION:
        raise DataError(f"unsupported trace version {version} at byte offset 4, expected {TRACE_VERSION}")
    if layers < 1:
        raise DataError("num_layers is 0 at byte offset 8")
    if heads < 1:
        raise DataError("num_heads is 0 at byte offset 12")
    if dim < 1:
        raise DataError("head_dim is 0 at byte offset 16")
    if dtype_code not in _DTYPE_NP:
        raise DataError(f"unknown dtype code {dtype_code} at byte offset 20")
    if prefill < 1:
        raise DataError("prefill length is 0 at byte offset 21")
    return TraceHeader(
        num_layers=layers,
        num_heads=heads,
        head_dim=dim,
        dtype_code=dtype_code,
        prefill_len=prefill,
        decode_steps=steps,
    )


def read_trace(path: str) -> KvStream:
    """Load a trace file into a float64 KvStream.

    Raises:
        DataError: On any structural defect, pointing at the byte offset
            where the file stops matching the format.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    header = _parse_header(blob, len(blob))

    body = blob[HEADER_SIZE:]
    expected = header.body_bytes
    if len(body) != expected:
        raise DataError(
            f"trace body is {len(body)} bytes, expected {expected}; "
            f"file diverges from the format at byte offset {HEADER_SIZE + min(len(body), expected)}"
        )

    np_dtype = _DTYPE_NP[header.dtype_code]
    flat = np.frombuffer(body, dtype=np_dtype)
    L, H, T, S, d = header.num_layers, header.num_heads, header.prefill_len, header.decode_steps, header.head_dim

    pos = 0
    prefill_k = np.empty((L, H, T, d), dtype=np.float64)
    prefill_v = np.empty((L, H, T, d), dtype=np.float64)
    block = H * T * d
    for layer in range(L):
        prefill_k[layer] = flat[pos : pos + block].reshape(H, T, d)
        pos += block
        prefill_v[layer] = flat[pos : pos + block].reshape(H, T, d)
        pos += block
    decode_k = np.empty((L, H, S, d), dtype=np.float64)
    decode_v = np.empty((L, H, S, d), dtype=np.float64)
    step_block = H * d
    for step in range(S):
        for layer in range(L):
            decode_k[layer, :, step] = flat[pos : pos + step_block].reshape(H, d)
            pos += step_block
            decode_v[layer, :, step] = flat[pos : pos + step_block].reshape(H, d)
            pos += step_block

    for name, arr in (("prefill K", prefill_k), ("prefill V", prefill_v), ("decode K", decode_k), ("decode V", decode_v)):
        if not np.isfinite(arr).all():
            loc = np.argwhere(~np.isfinite(arr))[0]
            raise DataError(
                f"non-finite {name} element at layer {loc[0]}, head {loc[1]}, token {loc[2]}, dim {loc[3]}"
            )
    return KvStream(prefill_k=prefill_k, prefill_v=prefill_v, decode_k=decode_k, decode_v=decode_v)
