"""KV trace exporter: capture post-rotary K and cached V from small
causal language models during greedy decoding and write them as binary
trace files for downstream cache-compression tooling."""

from .capture import DEFAULT_MODEL, ExportSpec, ExportSummary, capture_kv, export_trace, uses_rotary_embeddings
from .errors import DataError, ExporterError, UsageError
from .tracefile import (
    HEADER_SIZE,
    TRACE_MAGIC,
    TRACE_VERSION,
    CapturedKv,
    TraceInfo,
    ValidationReport,
    read_trace_file,
    validate_trace,
    write_trace_file,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_MODEL",
    "HEADER_SIZE",
    "TRACE_MAGIC",
    "TRACE_VERSION",
    "CapturedKv",
    "DataError",
    "ExportSpec",
    "ExportSummary",
    "ExporterError",
    "TraceInfo",
    "UsageError",
    "ValidationReport",
    "capture_kv",
    "export_trace",
    "read_trace_file",
    "uses_rotary_embeddings",
    "validate_trace",
    "write_trace_file",
]
