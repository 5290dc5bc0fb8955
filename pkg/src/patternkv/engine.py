"""Per-head KV cache engine: prefill mining, decode flushing, committed
storage, reconstruction, and side-by-side scheme comparison.

Lifecycle per head: prefill mines pattern sets from the observed K and V
matrices and commits every token older than the full-precision residual
window. Each decode append joins the window; once the window exceeds the
retention length by one full quantization group, the oldest group_size
tokens are flushed together: the flushed span first contributes one new
pattern per cache side (its per-dimension midrange), then every flushed
vector is matched, gated (values), residualized, and group-quantized.
Keys group along tokens within a channel, values across the channels of
one token. Committed tokens never change afterwards.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, UsageError
from .gate import GateConfig, GateDecision, decide
from .patterns import (
    ORIGIN_DECODE,
    PatternSet,
    match_many,
    midrange_center,
    mine_patterns,
)
from .quant import PER_CHANNEL, PER_TOKEN, SUPPORTED_BITS, QuantizedGroup, dequantize_group, quantize_group
from .stream import KvStream

RAW_MARKER = -1


@dataclass(frozen=True)
class EngineConfig:
    """Static knobs of one cache scheme.

    use_k_patterns / use_v_patterns control residualization per side;
    with both off the engine degrades to plain per-channel K and
    per-token V quantization. generate_new_patterns adds one midrange
    pattern per side on every decode flush (only for sides with patterns
    enabled). use_v_gate runs the flattening test per value vector;
    use_k_gate extends it to keys and is off by default.
    """

    bits: int = 2
    pattern_count: int = 32
    group_size: int = 128
    residual_window: int = 128
    alpha: float = 0.05
    use_k_patterns: bool = True
    use_v_patterns: bool = True
    generate_new_patterns: bool = True
    use_v_gate: bool = True
    use_k_gate: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.bits not in SUPPORTED_BITS:
            raise UsageError(f"unsupported bit width {self.bits}; expected one of {SUPPORTED_BITS}")
        if self.pattern_count < 1:
            raise UsageError(f"pattern_count must be >= 1, got {self.pattern_count}")
        if self.group_size < 1:
            raise UsageError(f"group_size must be >= 1, got {self.group_size}")
        if self.residual_window < self.group_size:
            raise UsageError(
                f"residual_window ({self.residual_window}) must be >= group_size ({self.group_size})"
                " so flushes always fill whole groups"
            )
        if not 0.0 < self.alpha <= 0.5:
            raise UsageError(f"alpha must lie in (0, 0.5], got {self.alpha}")

    def raw_variant(self) -> "EngineConfig":
        """Same geometry with every pattern mechanism disabled."""
        return replace(self, use_k_patterns=False, use_v_patterns=False, generate_new_patterns=False)

    @property
    def is_raw(self) -> bool:
        return not (self.use_k_patterns or self.use_v_patterns or self.generate_new_patterns)


@dataclass
class CommittedKBlock:
    """group_size (or fewer, at the prefill boundary) key tokens encoded
    as one quantized group per channel."""

    start_token: int
    length: int
    channel_groups: list[QuantizedGroup]
    pattern_indices: np.ndarray  # (length,) int32, RAW_MARKER where unpatterned


@dataclass
class CommittedVToken:
    token_index: int
    group: QuantizedGroup
    pattern_index: int  # RAW_MARKER when quantized without a pattern


class HeadCacheState:
    """Mutable cache state of a single attention head."""

    def __init__(self, config: EngineConfig, head_dim: int):
        self.config = config
        self.head_dim = head_dim
        self.k_patterns = PatternSet(head_dim)
        self.v_patterns = PatternSet(head_dim)
        self.k_blocks: list[CommittedKBlock] = []
        self.v_tokens: list[CommittedVToken] = []
        self.window_k: list[np.ndarray] = []
        self.window_v: list[np.ndarray] = []
        self.token_count = 0
        self.v_decisions: list[GateDecision] = []
        self.k_decisions: list[GateDecision] = []
        self._gate: GateConfig | None = None

    @property
    def committed_count(self) -> int:
        return self.token_count - len(self.window_k)

    @property
    def gate(self) -> GateConfig:
        if self._gate is None:
            self._gate = GateConfig.create(self.head_dim, self.config.alpha)
        return self._gate


def _as_matrix(arr: np.ndarray, name: str) -> np.ndarray:
    mat = np.asarray(arr, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] < 1:
        raise UsageError(f"{name} must be a non-empty (tokens, dim) matrix")
    if not np.isfinite(mat).all():
        loc = np.argwhere(~np.isfinite(mat))[0]
        raise DataError(f"non-finite {name} element at token {loc[0]}, dim {loc[1]}")
    return mat


def prefill(k_tensor: np.ndarray, v_tensor: np.ndarray, config: EngineConfig) -> HeadCacheState:
    """Seed a head state from the prefill K/V matrices.

    Mines per-side pattern sets over the full matrices (K with the
    config seed, V with seed + 1), keeps the newest
    min(T, residual_window) tokens at full precision, and commits all
    earlier tokens through the match / gate / residualize / quantize
    path. Prefill tokens only ever reference prefill-mined patterns.
    """
    k = _as_matrix(k_tensor, "prefill K")
    v = _as_matrix(v_tensor, "prefill V")
    if k.shape != v.shape:
        raise UsageError(f"prefill K {k.shape} and V {v.shape} must have equal shapes")
    state = HeadCacheState(config, k.shape[1])
    if config.use_k_patterns:
        state.k_patterns = mine_patterns(k, config.pattern_count, config.seed)
    if config.use_v_patterns:
        state.v_patterns = mine_patterns(v, config.pattern_count, config.seed + 1)

    total = k.shape[0]
    commit_n = total - min(total, config.residual_window)
    for start in range(0, commit_n, config.group_size):
        stop = min(start + config.group_size, commit_n)
        _commit_span(state, k[start:stop], v[start:stop], start)
    state.window_k = [row.copy() for row in k[commit_n:]]
    state.window_v = [row.copy() for row in v[commit_n:]]
    state.token_count = total
    return state


def append_decode_token(k_vec: np.ndarray, v_vec: np.ndarray, state: HeadCacheState) -> HeadCacheState:
    """Append one decoded token to the window, flushing the oldest full
    group once the window exceeds the retention length by group_size."""
    cfg = state.config
    k = np.asarray(k_vec, dtype=np.float64).ravel()
    v = np.asarray(v_vec, dtype=np.float64).ravel()
    if k.shape != (state.head_dim,) or v.shape != (state.head_dim,):
        raise UsageError(f"decode vectors must have dimension {state.head_dim}")
    if not (np.isfinite(k).all() and np.isfinite(v).all()):
        raise DataError(f"non-finite decode vector at token {state.token_count}")
    state.window_k.append(k.copy())
    state.window_v.append(v.copy())
    state.token_count += 1

    if len(state.window_k) == cfg.residual_window + cfg.group_size:
        g = cfg.group_size
        k_span = np.stack(state.window_k[:g])
        v_span = np.stack(state.window_v[:g])
        if cfg.generate_new_patterns:
            if cfg.use_k_patterns:
                state.k_patterns.append(midrange_center(k_span), ORIGIN_DECODE)
            if cfg.use_v_patterns:
                state.v_patterns.append(midrange_center(v_span), ORIGIN_DECODE)
        _commit_span(state, k_span, v_span, state.committed_count)
        del state.window_k[:g]
        del state.window_v[:g]
    return state


def _commit_span(state: HeadCacheState, k_span: np.ndarray, v_span: np.ndarray, start_token: int) -> None:
    """Quantize a span of tokens: one per-channel block for K, one
    per-token group per V vector, both against the current pattern sets."""
    cfg = state.config
    length = k_span.shape[0]

    k_idx = np.full(length, RAW_MARKER, dtype=np.int32)
    k_eff = k_span.copy()
    if cfg.use_k_patterns and len(state.k_patterns) > 0:
        idx, residuals, dists = match_many(k_span, state.k_patterns)
        if cfg.use_k_gate:
            raw_ranges = k_span.max(axis=1) - k_span.min(axis=1)
            for i in range(length):
                decision = decide(float(raw_ranges[i]), float(dists[i]), state.gate)
                state.k_decisions.append(decision)
                if decision.flatten:
                    k_idx[i] = idx[i]
                    k_eff[i] = residuals[i]
        else:
            k_idx[:] = idx
            k_eff = residuals
    groups = [quantize_group(k_eff[:, c], cfg.bits, PER_CHANNEL) for c in range(state.head_dim)]
    state.k_blocks.append(
        CommittedKBlock(start_token=start_token, length=length, channel_groups=groups, pattern_indices=k_idx)
    )

    if cfg.use_v_patterns and len(state.v_patterns) > 0:
        idx, residuals, dists = match_many(v_span, state.v_patterns)
        raw_ranges = v_span.max(axis=1) - v_span.min(axis=1)
        for i in range(length):
            raw_range = float(raw_ranges[i])
            flat_range = float(dists[i])
            if cfg.use_v_gate:
                decision = decide(raw_range, flat_range, state.gate)
            else:
                ratio = math.inf if raw_range == 0.0 else flat_range / raw_range
                decision = GateDecision(flatten=True, ratio=ratio, raw_range=raw_range, flat_range=flat_range)
            state.v_decisions.append(decision)
            if decision.flatten:
                payload, pattern_index = residuals[i], int(idx[i])
            else:
                payload, pattern_index = v_span[i], RAW_MARKER
            group = quantize_group(payload, cfg.bits, PER_TOKEN)
            state.v_tokens.append(
                CommittedVToken(token_index=start_token + i, group=group, pattern_index=pattern_index)
            )
    else:
        for i in range(length):
            group = quantize_group(v_span[i], cfg.bits, PER_TOKEN)
            state.v_tokens.append(
                CommittedVToken(token_index=start_token + i, group=group, pattern_index=RAW_MARKER)
            )


def reconstruct_k_block(state: HeadCacheState, block: CommittedKBlock) -> np.ndarray:
    """Dequantize one committed K block back to (length, head_dim)."""
    mat = np.stack([dequantize_group(g) for g in block.channel_groups], axis=1)
    for i, pattern_index in enumerate(block.pattern_indices):
        if pattern_index != RAW_MARKER:
            mat[i] += state.k_patterns.vector(int(pattern_index))
    return mat


def reconstruct_v_token(state: HeadCacheState, token: CommittedVToken) -> np.ndarray:
    vals = dequantize_group(token.group)
    if token.pattern_index != RAW_MARKER:
        vals = vals + state.v_patterns.vector(token.pattern_index)
    return vals


def reconstruct_token(state: HeadCacheState, token_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Reconstruct one token's (K, V) pair, exact for window tokens.

    Pure read; the state is never modified.
    """
    if not 0 <= token_index < state.token_count:
        raise UsageError(f"token index {token_index} outside [0, {state.token_count})")
    committed = state.committed_count
    if token_index >= committed:
        offset = token_index - committed
        return state.window_k[offset].copy(), state.window_v[offset].copy()

    starts = [b.start_token for b in state.k_blocks]
    bi = bisect_right(starts, token_index) - 1
    block = state.k_blocks[bi]
    if not block.start_token <= token_index < block.start_token + block.length:
        raise DataError(f"committed blocks do not cover token {token_index}")
    k = reconstruct_k_block(state, block)[token_index - block.start_token]

    token = state.v_tokens[token_index]
    if token.token_index != token_index:
        raise DataError(f"committed V storage misaligned at token {token_index}")
    return k, reconstruct_v_token(state, token)


def committed_matrices(state: HeadCacheState) -> tuple[np.ndarray, np.ndarray]:
    """All committed tokens reconstructed as (K, V) matrices in order."""
    d = state.head_dim
    if state.committed_count == 0:
        return np.empty((0, d)), np.empty((0, d))
    k = np.concatenate([reconstruct_k_block(state, b) for b in state.k_blocks], axis=0)
    v = np.stack([reconstruct_v_token(state, t) for t in state.v_tokens])
    return k, v


def _side_bit_totals(state: HeadCacheState, side: str) -> tuple[int, int, int, int]:
    """(codes, group params, pattern indices, pattern storage) bit totals
    actually held by the committed structures of one side."""
    cfg = state.config
    d = state.head_dim
    if side == "k":
        codes = sum(b.length for b in state.k_blocks) * cfg.bits * d
        params = 32 * d * len(state.k_blocks)
        index = 16 * sum(b.length for b in state.k_blocks) if cfg.use_k_patterns else 0
        patterns = 16 * d * len(state.k_patterns)
    else:
        codes = len(state.v_tokens) * cfg.bits * d
        params = 32 * len(state.v_tokens)
        index = 16 * len(state.v_tokens) if cfg.use_v_patterns else 0
        patterns = 16 * d * len(state.v_patterns)
    return codes, params, index, patterns


def accounted_bits_per_token(state: HeadCacheState, side: str) -> float:
    """Committed storage cost per token from the actual structures,
    term-by-term in the same order as the analysis closed form."""
    if side not in ("k", "v"):
        raise UsageError(f"side must be 'k' or 'v', got {side!r}")
    c = state.committed_count
    if c == 0:
        return 0.0
    codes, params, index, patterns = _side_bit_totals(state, side)
    return codes / c + params / c + index / c + patterns / c


@dataclass
class HeadReport:
    layer: int
    head: int
    committed_tokens: int
    k_mse: float
    v_mse: float
    mse: float
    v_gate_acceptance_rate: float
    k_pattern_count: int
    v_pattern_count: int


@dataclass
class CacheMetrics:
    """Aggregated outcome of replaying one scheme over a stream."""

    scheme: str
    config: EngineConfig
    committed_tokens: int
    k_mse: float
    v_mse: float
    mse: float
    k_bits_per_token: float
    v_bits_per_token: float
    bits_per_token: float
    v_gate_acceptance_rate: float
    ratios: np.ndarray
    raw_ranges: np.ndarray
    flat_ranges: np.ndarray
    per_head: list[HeadReport] = field(default_factory=list)


def replay_head(
    k_prefill: np.ndarray,
    v_prefill: np.ndarray,
    k_decode: np.ndarray,
    v_decode: np.ndarray,
    config: EngineConfig,
) -> HeadCacheState:
    """Prefill then append every decode step for one head."""
    state = prefill(k_prefill, v_prefill, config)
    for step in range(k_decode.shape[0]):
        append_decode_token(k_decode[step], v_decode[step], state)
    return state


def run_scheme_comparison(stream: KvStream, schemes: list[tuple[str, EngineConfig]]) -> list[CacheMetrics]:
    """Replay the same stream under every scheme plus a raw baseline.

    The raw baseline (all pattern mechanisms off, plain per-channel K and
    per-token V quantization) is derived from the first scheme's
    geometry when not requested explicitly. Mean squared errors cover
    committed tokens only; window tokens are stored exactly.
    """
    if not schemes:
        raise UsageError("at least one scheme is required")
    for name, config in schemes:
        if name == "raw" and not config.is_raw:
            raise UsageError("a scheme named 'raw' must have all pattern toggles off")
    if not any(config.is_raw for _, config in schemes):
        schemes = [("raw", schemes[0][1].raw_variant())] + list(schemes)

    results = []
    for name, config in schemes:
        sse_k = 0.0
        sse_v = 0.0
        committed_total = 0
        bit_totals = {"k": np.zeros(4, dtype=np.int64), "v": np.zeros(4, dtype=np.int64)}
        ratios: list[np.ndarray] = []
        raw_ranges: list[np.ndarray] = []
        flat_ranges: list[np.ndarray] = []
        flattened = 0
        gated_tokens = 0
        per_head = []
        for layer in range(stream.num_layers):
            for head in range(stream.num_heads):
                kp, vp, kd, vd = stream.head_slices(layer, head)
                state = replay_head(kp, vp, kd, vd, config)
                c = state.committed_count
                truth_k = np.concatenate([kp, kd], axis=0)[:c]
                truth_v = np.concatenate([vp, vd], axis=0)[:c]
                rk, rv = committed_matrices(state)
                err_k = float(((rk - truth_k) ** 2).sum())
                err_v = float(((rv - truth_v) ** 2).sum())
                sse_k += err_k
                sse_v += err_v
                committed_total += c
                for side in ("k", "v"):
                    bit_totals[side] += np.asarray(_side_bit_totals(state, side), dtype=np.int64)
                head_flat = sum(1 for dec in state.v_decisions if dec.flatten)
                flattened += head_flat
                gated_tokens += len(state.v_decisions)
                if state.v_decisions:
                    ratios.append(np.array([dec.ratio for dec in state.v_decisions]))
                    raw_ranges.append(np.array([dec.raw_range for dec in state.v_decisions]))
                    flat_ranges.append(np.array([dec.flat_range for dec in state.v_decisions]))
                denom = max(c, 1) * stream.head_dim
                per_head.append(
                    HeadReport(
                        layer=layer,
                        head=head,
                        committed_tokens=c,
                        k_mse=err_k / denom,
                        v_mse=err_v / denom,
                        mse=(err_k + err_v) / (2 * denom),
                        v_gate_acceptance_rate=head_flat / len(state.v_decisions) if state.v_decisions else 0.0,
                        k_pattern_count=len(state.k_patterns),
                        v_pattern_count=len(state.v_patterns),
                    )
                )
        denom = max(committed_total, 1) * stream.head_dim
        side_bits = {}
        for side in ("k", "v"):
            codes, params, index, patterns = (int(x) for x in bit_totals[side])
            c = max(committed_total, 1)
            side_bits[side] = codes / c + params / c + index / c + patterns / c
        results.append(
            CacheMetrics(
                scheme=name,
                config=config,
                committed_tokens=committed_total,
                k_mse=sse_k / denom,
                v_mse=sse_v / denom,
                mse=(sse_k + sse_v) / (2 * denom),
                k_bits_per_token=side_bits["k"],
                v_bits_per_token=side_bits["v"],
                bits_per_token=side_bits["k"] + side_bits["v"],
                v_gate_acceptance_rate=flattened / gated_tokens if gated_tokens else 0.0,
                ratios=np.concatenate(ratios) if ratios else np.empty(0),
                raw_ranges=np.concatenate(raw_ranges) if raw_ranges else np.empty(0),
                flat_ranges=np.concatenate(flat_ranges) if flat_ranges else np.empty(0),
                per_head=per_head,
            )
        )
    return results
