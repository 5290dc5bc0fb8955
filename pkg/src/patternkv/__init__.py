"""Pattern-aligned residual quantization for transformer KV caches.

The package is organized around a replayable cache engine: incoming key
and value vectors are matched against a small mined pattern set, the
residual (or a flattened raw copy, chosen by a statistical gate) is
quantized in fixed-size groups, and every committed token can be
reconstructed bit-exactly from the stored state.
"""

from .analysis import (
    DEFAULT_STREAM_SPEC,
    CoveringReport,
    KeyModel,
    SyntheticStreamSpec,
    ValueModel,
    VarianceReport,
    bits_per_token,
    consistency_metric,
    covering_bound_check,
    fp16_reference_bits_per_token,
    generate_synthetic_stream,
    parse_stream_spec,
    variance_decomposition,
)
from .engine import (
    RAW_MARKER,
    CacheMetrics,
    EngineConfig,
    HeadCacheState,
    append_decode_token,
    prefill,
    reconstruct_token,
    run_scheme_comparison,
)
from .errors import DataError, UsageError
from .gate import GateConfig, GateDecision, contraction_threshold, decide, expected_error_gain, z_quantile
from .patterns import PatternMatch, PatternSet, lloyd_kmeans, match_pattern, midrange_center, mine_patterns, minmax_distance
from .quant import QuantizedGroup, QuantParams, dequantize_group, pack_codes, quantize_group, unpack_codes
from .snapshot import load_snapshot, save_snapshot
from .stream import KvStream, TraceHeader, read_trace, read_trace_header, write_trace

__version__ = "0.1.0"

__all__ = [
    "CacheMetrics",
    "CoveringReport",
    "DEFAULT_STREAM_SPEC",
    "DataError",
    "EngineConfig",
    "GateConfig",
    "GateDecision",
    "HeadCacheState",
    "KeyModel",
    "KvStream",
    "PatternMatch",
    "PatternSet",
    "QuantParams",
    "QuantizedGroup",
    "RAW_MARKER",
    "SyntheticStreamSpec",
    "TraceHeader",
    "UsageError",
    "ValueModel",
    "VarianceReport",
    "append_decode_token",
    "bits_per_token",
    "consistency_metric",
    "contraction_threshold",
    "covering_bound_check",
    "decide",
    "dequantize_group",
    "expected_error_gain",
    "fp16_reference_bits_per_token",
    "generate_synthetic_stream",
    "load_snapshot",
    "lloyd_kmeans",
    "match_pattern",
    "midrange_center",
    "mine_patterns",
    "minmax_distance",
    "pack_codes",
    "parse_stream_spec",
    "prefill",
    "quantize_group",
    "read_trace",
    "read_trace_header",
    "reconstruct_token",
    "run_scheme_comparison",
    "save_snapshot",
    "unpack_codes",
    "variance_decomposition",
    "write_trace",
    "z_quantile",
]
