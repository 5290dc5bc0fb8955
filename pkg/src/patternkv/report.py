"""Versioned JSON run reports.

Reports are self-contained: the echoed config and seed reproduce the run
bit-exactly. The reader ignores unknown fields so future writers can add
fields without breaking old readers. Apart from wall_clock_seconds every
field is deterministic for fixed flags and seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .engine import CacheMetrics

SCHEMA_VERSION = 1


@dataclass
class RunReport:
    schema_version: int
    command: str
    seed: int
    config: dict
    input: dict
    schemes: list[dict]
    wall_clock_seconds: float = 0.0
    extras: dict = field(default_factory=dict)


def _array_summary(values: np.ndarray) -> dict:
    finite = values[np.isfinite(values)]
    summary = {
        "count": int(values.size),
        "non_finite": int(values.size - finite.size),
    }
    if finite.size:
        summary.update(
            mean=float(finite.mean()),
            p50=float(np.percentile(finite, 50)),
            p90=float(np.percentile(finite, 90)),
            min=float(finite.min()),
            max=float(finite.max()),
        )
    return summary


def metrics_to_dict(metrics: CacheMetrics) -> dict:
    return {
        "scheme": metrics.scheme,
        "config": asdict(metrics.config),
        "committed_tokens": int(metrics.committed_tokens),
        "k_mse": float(metrics.k_mse),
        "v_mse": float(metrics.v_mse),
        "mse": float(metrics.mse),
        "k_bits_per_token": float(metrics.k_bits_per_token),
        "v_bits_per_token": float(metrics.v_bits_per_token),
        "bits_per_token": float(metrics.bits_per_token),
        "v_gate_acceptance_rate": float(metrics.v_gate_acceptance_rate),
        "contraction_ratios": _array_summary(metrics.ratios),
        "raw_ranges": _array_summary(metrics.raw_ranges),
        "flat_ranges": _array_summary(metrics.flat_ranges),
        "per_head": [
            {
                "layer": h.layer,
                "head": h.head,
                "committed_tokens": h.committed_tokens,
                "k_mse": float(h.k_mse),
                "v_mse": float(h.v_mse),
                "mse": float(h.mse),
                "v_gate_acceptance_rate": float(h.v_gate_acceptance_rate),
                "k_pattern_count": h.k_pattern_count,
                "v_pattern_count": h.v_pattern_count,
            }
            for h in metrics.per_head
        ],
    }


def report_to_json(report: RunReport) -> str:
    payload = {
        "schema_version": report.schema_version,
        "command": report.command,
        "seed": report.seed,
        "config": report.config,
        "input": report.input,
        "schemes": report.schemes,
        "wall_clock_seconds": report.wall_clock_seconds,
    }
    payload.update(report.extras)
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def write_report(report: RunReport, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(report_to_json(report))


def read_report(path: str) -> RunReport:
    """Load a report, tolerating fields this version does not know."""
    with open(path) as fh:
        raw = json.load(fh)
    known = {"schema_version", "command", "seed", "config", "input", "schemes", "wall_clock_seconds"}
    return RunReport(
        schema_version=raw.get("schema_version", 0),
        command=raw.get("command", ""),
        seed=raw.get("seed", 0),
        config=raw.get("config", {}),
        input=raw.get("input", {}),
        schemes=raw.get("schemes", []),
        wall_clock_seconds=raw.get("wall_clock_seconds", 0.0),
        extras={k: v for k, v in raw.items() if k not in known},
    )
