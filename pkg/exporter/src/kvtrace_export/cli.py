"""Command-line front end: `export` writes a trace, `validate` re-checks
one. Exit codes follow the trace consumers' contract: 0 success,
1 usage problems, 2 bad data or a failed capture."""

from __future__ import annotations

import argparse
import sys

from .capture import DEFAULT_MODEL, ExportSpec, export_trace
from .errors import DataError, UsageError
from .tracefile import validate_trace


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kvtrace-export", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    export = sub.add_parser("export", help="capture one greedy generation into a trace file")
    export.add_argument("--model", default=DEFAULT_MODEL, help="model identifier or checkpoint directory")
    export.add_argument("--prompt-file", required=True, help="text file holding the prompt")
    export.add_argument("--decode-steps", type=int, default=0, help="greedy decode steps after prefill")
    export.add_argument("--output", required=True, help="trace file to write")
    export.add_argument("--seed", type=int, default=0)
    export.add_argument("--dtype", choices=("float16", "float32"), default="float32")

    validate = sub.add_parser("validate", help="re-read a trace and check structure and finiteness")
    validate.add_argument("--input", required=True, help="trace file to check")
    return parser


def cmd_export(args: argparse.Namespace) -> int:
    spec = ExportSpec(
        model=args.model,
        prompt_file=args.prompt_file,
        decode_steps=args.decode_steps,
        output=args.output,
        seed=args.seed,
        dtype=args.dtype,
    )
    export_trace(spec)
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    report = validate_trace(args.input)
    print(report.message if report.ok else f"invalid trace: {report.message}", file=sys.stdout if report.ok else sys.stderr)
    return 0 if report.ok else 2


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.error("a command is required")
        if args.command == "export":
            return cmd_export(args)
        return cmd_validate(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (MemoryError, RuntimeError) as exc:
        print(f"capture failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
