"""Binary snapshots of committed cache state.

Layout (all little-endian, packed):

    magic    4 bytes  b"PKVS"
    version  u32      currently 1
    config   bits u8, pattern_count u32, group_size u32,
             residual_window u32, alpha f64, flags u8, seed i64
             flags bit 0: use_k_patterns   bit 1: use_v_patterns
             bit 2: generate_new_patterns  bit 3: use_v_gate
             bit 4: use_k_gate
    head_dim u32
    states   u32 count, then per state:
        layer u32, head u32, token_count u64
        K patterns: u32 count, then per pattern origin u8 (0 prefill,
            1 decode) and head_dim f64 components
        V patterns: same layout
        K blocks: u32 count, then per block start u64, length u32,
            length i32 pattern indices (-1 raw), then head_dim groups of
            scale f64, zero f64, ceil(length * bits / 8) packed bytes
        V tokens: u32 count, then per token index u64, pattern i32,
            scale f64, zero f64, ceil(head_dim * bits / 8) packed bytes
        window: u32 count, count*head_dim f64 K rows, then V rows
        V gate decisions: u32 count, then per decision flatten u8,
            ratio f64 (may be +inf), raw_range f64, flat_range f64
        K gate decisions: same layout
"""

from __future__ import annotations

import struct

import numpy as np

from .engine import CommittedKBlock, CommittedVToken, EngineConfig, HeadCacheState
from .errors import DataError, UsageError
from .gate import GateDecision
from .patterns import ORIGIN_DECODE, ORIGIN_PREFILL, PatternSet
from .quant import PER_CHANNEL, PER_TOKEN, QuantParams, QuantizedGroup

SNAPSHOT_MAGIC = b"PKVS"
SNAPSHOT_VERSION = 1

_ORIGIN_CODE = {ORIGIN_PREFILL: 0, ORIGIN_DECODE: 1}
_ORIGIN_NAME = {0: ORIGIN_PREFILL, 1: ORIGIN_DECODE}


def _flags(config: EngineConfig) -> int:
    return (
        (config.use_k_patterns << 0)
        | (config.use_v_patterns << 1)
        | (config.generate_new_patterns << 2)
        | (config.use_v_gate << 3)
        | (config.use_k_gate << 4)
    )


def save_snapshot(path: str, states: dict[tuple[int, int], HeadCacheState]) -> None:
    """Serialize a cache (one config, many heads) to the snapshot format."""
    if not states:
        raise UsageError("cannot snapshot an empty cache")
    items = sorted(states.items())
    config = items[0][1].config
    head_dim = items[0][1].head_dim
    for _, state in items:
        if state.config != config or state.head_dim != head_dim:
            raise UsageError("all snapshot heads must share one config and head dimension")

    out = bytearray()
    out += struct.pack("<4sI", SNAPSHOT_MAGIC, SNAPSHOT_VERSION)
    out += struct.pack(
        "<BIIIdBq",
        config.bits,
        config.pattern_count,
        config.group_size,
        config.residual_window,
        config.alpha,
        _flags(config),
        config.seed,
    )
    out += struct.pack("<II", head_dim, len(items))
    for (layer, head), state in items:
        out += struct.pack("<IIQ", layer, head, state.token_count)
        _write_patterns(out, state.k_patterns)
        _write_patterns(out, state.v_patterns)
        out += struct.pack("<I", len(state.k_blocks))
        for block in state.k_blocks:
            out += struct.pack("<QI", block.start_token, block.length)
            out += np.asarray(block.pattern_indices, dtype="<i4").tobytes()
            for group in block.channel_groups:
                out += struct.pack("<dd", group.params.scale, group.params.zero_point)
                out += group.codes
        out += struct.pack("<I", len(state.v_tokens))
        for token in state.v_tokens:
            out += struct.pack("<Qi", token.token_index, token.pattern_index)
            out += struct.pack("<dd", token.group.params.scale, token.group.params.zero_point)
            out += token.group.codes
        out += struct.pack("<I", len(state.window_k))
        for row in state.window_k:
            out += np.asarray(row, dtype="<f8").tobytes()
        for row in state.window_v:
            out += np.asarray(row, dtype="<f8").tobytes()
        _write_decisions(out, state.v_decisions)
        _write_decisions(out, state.k_decisions)
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def _write_patterns(out: bytearray, patterns: PatternSet) -> None:
    out += struct.pack("<I", len(patterns))
    for i in range(len(patterns)):
        out += struct.pack("<B", _ORIGIN_CODE[patterns.origin(i)])
        out += np.asarray(patterns.vector(i), dtype="<f8").tobytes()


def _write_decisions(out: bytearray, decisions: list[GateDecision]) -> None:
    out += struct.pack("<I", len(decisions))
    for dec in decisions:
        out += struct.pack("<Bddd", int(dec.flatten), dec.ratio, dec.raw_range, dec.flat_range)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.blob):
            raise DataError(f"snapshot truncated at byte offset {self.pos}, needed {size} more bytes")
        vals = struct.unpack_from(fmt, self.blob, self.pos)
        self.pos += size
        return vals

    def take_bytes(self, size: int) -> bytes:
        if self.pos + size > len(self.blob):
            raise DataError(f"snapshot truncated at byte offset {self.pos}, needed {size} more bytes")
        chunk = self.blob[self.pos : self.pos + size]
        self.pos += size
        return chunk

    def take_f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take_bytes(8 * count), dtype="<f8").astype(np.float64)


def load_snapshot(path: str) -> tuple[EngineConfig, dict[tuple[int, int], HeadCacheState]]:
    """Load a snapshot back into per-head states."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    magic, version = reader.take("<4sI")
    if magic != SNAPSHOT_MAGIC:
        raise DataError(f"bad magic {magic!r} at byte offset 0, expected {SNAPSHOT_MAGIC!r}")
    if version != SNAPSHOT_VERSION:
        raise DataError(f"unsupported snapshot version {version} at byte offset 4")
    bits, pattern_count, group_size, residual_window, alpha, flags, seed = reader.take("<BIIIdBq")
    config = EngineConfig(
        bits=bits,
        pattern_count=pattern_count,
        group_size=group_size,
        residual_window=residual_window,
        alpha=alpha,
        use_k_patterns=bool(flags & 1),
        use_v_patterns=bool(flags & 2),
        generate_new_patterns=bool(flags & 4),
        use_v_gate=bool(flags & 8),
        use_k_gate=bool(flags & 16),
        seed=seed,
    )
    head_dim, state_count = reader.take("<II")
    states: dict[tuple[int, int], HeadCacheState] = {}
    for _ in range(state_count):
        layer, head, token_count = reader.take("<IIQ")
        state = HeadCacheState(config, head_dim)
        state.k_patterns = _read_patterns(reader, head_dim)
        state.v_patterns = _read_patterns(reader, head_dim)
        (block_count,) = reader.take("<I")
        packed = lambda n: (n * bits + 7) // 8
        for _ in range(block_count):
            start, length = reader.take("<QI")
            indices = np.frombuffer(reader.take_bytes(4 * length), dtype="<i4").astype(np.int32)
            groups = []
            for _ in range(head_dim):
                scale, zero = reader.take("<dd")
                codes = reader.take_bytes(packed(length))
                groups.append(
                    QuantizedGroup(
                        params=QuantParams(scale=scale, zero_point=zero, bits=bits),
                        codes=codes,
                        length=length,
                        layout=PER_CHANNEL,
                    )
                )
            state.k_blocks.append(
                CommittedKBlock(start_token=start, length=length, channel_groups=groups, pattern_indices=indices)
            )
        (v_count,) = reader.take("<I")
        for _ in range(v_count):
            token_index, pattern_index = reader.take("<Qi")
            scale, zero = reader.take("<dd")
            codes = reader.take_bytes(packed(head_dim))
            state.v_tokens.append(
                CommittedVToken(
                    token_index=token_index,
                    group=QuantizedGroup(
                        params=QuantParams(scale=scale, zero_point=zero, bits=bits),
                        codes=codes,
                        length=head_dim,
                        layout=PER_TOKEN,
                    ),
                    pattern_index=pattern_index,
                )
            )
        (window_count,) = reader.take("<I")
        state.window_k = [reader.take_f64(head_dim) for _ in range(window_count)]
        state.window_v = [reader.take_f64(head_dim) for _ in range(window_count)]
        state.v_decisions = _read_decisions(reader)
        state.k_decisions = _read_decisions(reader)
        state.token_count = token_count
        states[(layer, head)] = state
    if reader.pos != len(reader.blob):
        raise DataError(f"unexpected {len(reader.blob) - reader.pos} trailing bytes at offset {reader.pos}")
    return config, states


def _read_patterns(reader: _Reader, head_dim: int) -> PatternSet:
    (count,) = reader.take("<I")
    patterns = PatternSet(head_dim)
    for _ in range(count):
        (origin_code,) = reader.take("<B")
        if origin_code not in _ORIGIN_NAME:
            raise DataError(f"unknown pattern origin code {origin_code} at byte offset {reader.pos - 1}")
        vec = reader.take_f64(head_dim)
        patterns.append(vec, _ORIGIN_NAME[origin_code])
    return patterns


def _read_decisions(reader: _Reader) -> list[GateDecision]:
    (count,) = reader.take("<I")
    out = []
    for _ in range(count):
        flatten, ratio, raw_range, flat_range = reader.take("<Bddd")
        out.append(GateDecision(flatten=bool(flatten), ratio=ratio, raw_range=raw_range, flat_range=flat_range))
    return out
