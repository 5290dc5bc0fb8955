"""Greedy-decode KV capture from small causal language models.

The capture point is the attention cache itself: for rotary-embedding
models the cached keys are the post-rotation tensors, which is the
representation downstream consumers quantize. Models that do not apply
rotary embeddings are refused outright rather than silently exporting
pre-rotation keys.

Heavy dependencies (torch, transformers) are imported inside the entry
points so the file-format half of the package stays importable without
them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .tracefile import CapturedKv, write_trace_file

DEFAULT_MODEL = "meta-llama/Llama-3.2-1B"


@dataclass(frozen=True)
class ExportSpec:
    """One capture request.

    Args:
        model: Model identifier or local checkpoint directory.
        prompt_file: Text file whose contents seed the generation.
        decode_steps: Greedy decode steps to capture after prefill.
            End-of-sequence tokens get no special treatment, keeping
            trace shapes a pure function of this spec.
        output: Destination trace path.
        seed: Torch seed set before loading and decoding.
        dtype: Trace payload dtype, "float16" or "float32".
    """

    model: str = DEFAULT_MODEL
    prompt_file: str = "prompt.txt"
    decode_steps: int = 0
    output: str = "trace.kvtr"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.decode_steps < 0:
            raise UsageError(f"decode_steps must be >= 0, got {self.decode_steps}")
        if self.dtype not in ("float16", "float32"):
            raise UsageError(f"dtype must be 'float16' or 'float32', got {self.dtype!r}")


@dataclass(frozen=True)
class ExportSummary:
    """Shapes and size of one written trace."""

    path: str
    num_layers: int
    num_heads: int
    head_dim: int
    prefill_len: int
    decode_steps: int
    byte_count: int

    def describe(self) -> str:
        return (
            f"wrote {self.path}: {self.num_layers} layers, {self.num_heads} kv heads, "
            f"head_dim {self.head_dim}, prefill {self.prefill_len}, "
            f"decode steps {self.decode_steps}, {self.byte_count} bytes"
        )


def uses_rotary_embeddings(config) -> bool:
    """Whether a model config declares rotary position embeddings."""
    if getattr(config, "rope_parameters", None):
        return True
    return getattr(config, "rope_theta", None) is not None


def capture_kv(spec: ExportSpec) -> CapturedKv:
    """Run prefill plus greedy decode and return the cache contents.

    Returns:
        Per-layer (heads, prefill + decode_steps, head_dim) K and V
        matrices exactly as the attention cache stored them.

    Raises:
        UsageError: Non-rotary model, empty prompt, or a prompt longer
            than the model's position budget.
    """
    import torch
    from transformers import AutoConfig, AutoModelForCausalLM, AutoTokenizer

    config = AutoConfig.from_pretrained(spec.model)
    if not uses_rotary_embeddings(config):
        raise UsageError(
            f"model {spec.model!r} does not apply rotary position embeddings; "
            "its cache holds keys in a different basis, refusing to capture"
        )

    with open(spec.prompt_file, "r", encoding="utf-8") as fh:
        prompt = fh.read()
    if not prompt.strip():
        raise UsageError(f"prompt file {spec.prompt_file!r} is empty")

    torch.manual_seed(spec.seed)
    tokenizer = AutoTokenizer.from_pretrained(spec.model)
    model = AutoModelForCausalLM.from_pretrained(spec.model, dtype=torch.float32)
    model.eval()

    ids = tokenizer(prompt, return_tensors="pt").input_ids
    if ids.shape[1] < 1:
        raise UsageError("prompt tokenized to zero tokens")
    limit = getattr(model.config, "max_position_embeddings", None)
    if limit is not None and ids.shape[1] + spec.decode_steps > limit:
        raise UsageError(
            f"prompt ({ids.shape[1]} tokens) plus decode_steps ({spec.decode_steps}) "
            f"exceeds the model's {limit}-position budget"
        )

    with torch.no_grad():
        out = model(input_ids=ids, use_cache=True)
        cache = out.past_key_values
        logits = out.logits
        for _ in range(spec.decode_steps):
            nxt = logits[:, -1].argmax(dim=-1, keepdim=True)
            out = model(input_ids=nxt, past_key_values=cache, use_cache=True)
            cache = out.past_key_values
            logits = out.logits

    keys = [layer.keys[0].numpy().astype(np.float64) for layer in cache.layers]
    values = [layer.values[0].numpy().astype(np.float64) for layer in cache.layers]
    total = ids.shape[1] + spec.decode_steps
    if any(arr.shape[1] != total for arr in keys):
        raise UsageError(f"cache holds {keys[0].shape[1]} tokens, expected {total}")
    return CapturedKv(keys=keys, values=values, prefill_len=ids.shape[1])


def export_trace(spec: ExportSpec) -> ExportSummary:
    """Capture per spec and write the trace, printing a shape summary."""
    capture = capture_kv(spec)
    byte_count = write_trace_file(spec.output, capture, dtype=spec.dtype)
    summary = ExportSummary(
        path=spec.output,
        num_layers=capture.num_layers,
        num_heads=capture.num_heads,
        head_dim=capture.head_dim,
        prefill_len=capture.prefill_len,
        decode_steps=capture.decode_steps,
        byte_count=byte_count,
    )
    print(summary.describe())
    return summary
