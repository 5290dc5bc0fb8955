"""Command line front end: compare, verify, inspect.

Thin shell over the library; every behavior here is reachable through
library calls. Exit codes are a stable contract: 0 success, 1 usage
errors, 2 data errors or failed verification properties.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import asdict, replace

import numpy as np

from . import analysis, report as report_mod, verify as verify_mod
from .engine import EngineConfig, run_scheme_comparison
from .errors import DataError, UsageError
from .stream import read_trace, read_trace_header

_SCHEME_NAMES = ("raw", "patternkv")


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the contract reserves 2 for data."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="patternkv", description="Pattern-aligned residual KV cache quantization")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    cmp_p = sub.add_parser("compare", help="replay a stream under multiple schemes and report metrics")
    src = cmp_p.add_mutually_exclusive_group()
    src.add_argument("--input", metavar="TRACE", help="binary trace file to replay")
    src.add_argument(
        "--synthetic",
        metavar="SPEC",
        help="synthetic stream spec file, or the literal 'default' for the built-in spec",
    )
    cmp_p.add_argument("--bits", type=int, choices=(2, 4, 8), default=2, help="code width (default 2)")
    cmp_p.add_argument("--patterns", type=int, default=32, metavar="N", help="prefill pattern budget per side (default 32)")
    cmp_p.add_argument(
        "--group-size",
        type=int,
        default=128,
        metavar="G",
        help="quantization group length (default 128; the residual window grows to match when larger)",
    )
    cmp_p.add_argument("--alpha", type=float, default=0.05, metavar="A", help="gate significance level (default 0.05)")
    cmp_p.add_argument(
        "--scheme",
        action="append",
        choices=_SCHEME_NAMES,
        metavar="{raw,patternkv}",
        help="scheme to run; repeatable (default: both)",
    )
    cmp_p.add_argument("--no-k-pattern", action="store_true", help="disable key residualization")
    cmp_p.add_argument("--no-v-pattern", action="store_true", help="disable value residualization")
    cmp_p.add_argument("--no-new-pattern", action="store_true", help="disable per-flush pattern generation")
    cmp_p.add_argument("--no-v-gate", action="store_true", help="flatten every matched value vector unconditionally")
    cmp_p.add_argument("--k-gate", action="store_true", help="extend the flattening gate to keys (default off)")
    cmp_p.add_argument("--seed", type=int, default=None, metavar="S", help="seed override (default: spec seed or 0)")
    cmp_p.add_argument("--output", metavar="PATH", help="write the JSON report here")
    cmp_p.set_defaults(func=cmd_compare)

    ver_p = sub.add_parser("verify", help="run randomized property suites")
    ver_p.add_argument("--suite", choices=verify_mod.SUITE_NAMES, help="single suite (default: all)")
    ver_p.add_argument("--seed", type=int, default=0, metavar="S")
    ver_p.set_defaults(func=cmd_verify)

    ins_p = sub.add_parser("inspect", help="print trace header and key channel statistics")
    ins_p.add_argument("--input", metavar="TRACE", required=True)
    ins_p.add_argument("--outlier-threshold", type=float, default=5.0, metavar="K", help="flag channels above K x median mean-abs (default 5)")
    ins_p.add_argument("--csv", metavar="PATH", help="write the full per-channel table here")
    ins_p.set_defaults(func=cmd_inspect)
    return parser


def cmd_compare(args) -> int:
    started = time.monotonic()
    if (args.input is None) == (args.synthetic is None):
        raise UsageError("exactly one of --input or --synthetic is required")

    if args.input is not None:
        stream = read_trace(args.input)
        header = read_trace_header(args.input)
        seed = args.seed if args.seed is not None else 0
        input_desc = {
            "kind": "trace",
            "path": args.input,
            "num_layers": header.num_layers,
            "num_heads": header.num_heads,
            "head_dim": header.head_dim,
            "dtype": header.dtype_name,
            "prefill_len": header.prefill_len,
            "decode_steps": header.decode_steps,
        }
    else:
        if args.synthetic == "default":
            spec = analysis.DEFAULT_STREAM_SPEC
        else:
            with open(args.synthetic) as fh:
                spec = analysis.parse_stream_spec(fh.read())
        seed = args.seed if args.seed is not None else spec.seed
        spec = replace(spec, seed=seed)
        stream = analysis.generate_synthetic_stream(spec)
        input_desc = {"kind": "synthetic", "spec": _spec_dict(spec)}

    base = EngineConfig(
        bits=args.bits,
        pattern_count=args.patterns,
        group_size=args.group_size,
        residual_window=max(128, args.group_size),
        alpha=args.alpha,
        use_k_patterns=not args.no_k_pattern,
        use_v_patterns=not args.no_v_pattern,
        generate_new_patterns=not args.no_new_pattern,
        use_v_gate=not args.no_v_gate,
        use_k_gate=args.k_gate,
        seed=seed,
    )
    requested = args.scheme or list(_SCHEME_NAMES)
    schemes = []
    for name in dict.fromkeys(requested):
        schemes.append((name, base.raw_variant() if name == "raw" else base))
    results = run_scheme_comparison(stream, schemes)

    print(f"{'scheme':<12} {'mse':>12} {'k_mse':>12} {'v_mse':>12} {'bits/token':>11} {'v_accept':>9}")
    for m in results:
        print(
            f"{m.scheme:<12} {m.mse:>12.6g} {m.k_mse:>12.6g} {m.v_mse:>12.6g}"
            f" {m.bits_per_token:>11.2f} {m.v_gate_acceptance_rate:>9.3f}"
        )

    run_report = report_mod.RunReport(
        schema_version=report_mod.SCHEMA_VERSION,
        command="compare",
        seed=seed,
        config=asdict(base),
        input=input_desc,
        schemes=[report_mod.metrics_to_dict(m) for m in results],
        wall_clock_seconds=time.monotonic() - started,
    )
    if args.output:
        report_mod.write_report(run_report, args.output)
        print(f"report written to {args.output}")
    return 0


def _spec_dict(spec: analysis.SyntheticStreamSpec) -> dict:
    d = asdict(spec)
    d["k_model"] = asdict(spec.k_model)
    d["v_model"] = asdict(spec.v_model)
    return d


def cmd_verify(args) -> int:
    suites = [args.suite] if args.suite else list(verify_mod.SUITE_NAMES)
    all_passed = True
    for suite in suites:
        for res in verify_mod.run_suite(suite, args.seed):
            tag = "PASS" if res.passed else "FAIL"
            print(f"[{tag}] {res.suite}/{res.name}: {res.detail}")
            all_passed = all_passed and res.passed
    return 0 if all_passed else 2


def cmd_inspect(args) -> int:
    header = read_trace_header(args.input)
    print(
        f"trace {args.input}: {header.num_layers} layer(s), {header.num_heads} head(s),"
        f" head_dim {header.head_dim}, dtype {header.dtype_name},"
        f" prefill {header.prefill_len}, decode steps {header.decode_steps}"
    )
    stream = read_trace(args.input)
    stats = analysis.channel_statistics(stream)
    rows = []
    for row in stats:
        flagged = analysis.outlier_channels(row, args.outlier_threshold)
        print(
            f"layer {row['layer']}: median |K| per channel {row['median_mean_abs']:.6g};"
            f" outlier channels above {args.outlier_threshold:g}x median: {flagged if flagged else 'none'}"
        )
        top = np.argsort(row["mean_abs"])[::-1][:5]
        for c in top:
            print(
                f"  channel {int(c):>4}: mean|K| {row['mean_abs'][c]:.6g}"
                f" range [{row['min'][c]:.6g}, {row['max'][c]:.6g}]"
            )
        for c in range(stream.head_dim):
            rows.append(
                {
                    "layer": row["layer"],
                    "channel": c,
                    "mean_abs": row["mean_abs"][c],
                    "min": row["min"][c],
                    "max": row["max"][c],
                    "outlier": int(c in flagged),
                }
            )
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["layer", "channel", "mean_abs", "min", "max", "outlier"])
            writer.writeheader()
            writer.writerows(rows)
        print(f"channel table written to {args.csv}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
