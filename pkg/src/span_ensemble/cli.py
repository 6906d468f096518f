"""Command-line interface: run, eval, sweep, validate-pool.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every fatal
error prints a single line starting with "error:" on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .backends import HttpBackend, TableLM, load_pool
from .core import generate, write_transcript
from .errors import SpanEnsembleError
from .harness import METRICS, SweepSpec, run_eval, run_sweep, sweep_csv, write_sweep_csv
from .types import EnsembleConfig


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: A003 - argparse API
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(2)


def _positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return number


def _threshold(value: str) -> float:
    number = float(value)
    if number < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return number


def _add_ensemble_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--span-length", type=_positive_int, default=4, metavar="INT",
        help="words per candidate span (default: 4)",
    )
    parser.add_argument(
        "--lambda", dest="lam", type=_threshold, default=10.0, metavar="REAL",
        help="outlier ratio threshold; 0 is most aggressive (default: 10)",
    )
    parser.add_argument(
        "--no-filter", action="store_true",
        help="keep every valid score (disable outlier filtering)",
    )
    parser.add_argument(
        "--max-words", type=_positive_int, default=256, metavar="INT",
        help="word budget for generated output (default: 256)",
    )
    parser.add_argument(
        "--workers", type=_positive_int, default=None, metavar="INT",
        help="fan-out thread count (default: pool size for generation, 4 for eval)",
    )
    parser.add_argument(
        "--timeout-ms", type=_positive_int, default=None, metavar="INT",
        help="override HTTP backend timeouts",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="span-ensemble",
        description="Span-level ensemble decoding over a pool of language models.",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run_parser = sub.add_parser("run", help="ensemble-decode a single prompt")
    run_parser.add_argument("--pool", required=True, metavar="PATH", help="pool config JSON")
    source = run_parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--prompt", metavar="STR", help="prompt text")
    source.add_argument("--prompt-file", metavar="PATH", help="read the prompt from a file")
    run_parser.add_argument("--trace", metavar="PATH", help="write a JSONL transcript here")
    _add_ensemble_flags(run_parser)
    run_parser.set_defaults(func=cmd_run)

    eval_parser = sub.add_parser("eval", help="evaluate a pool on a JSONL dataset")
    eval_parser.add_argument("--pool", required=True, metavar="PATH")
    eval_parser.add_argument("--dataset", required=True, metavar="PATH")
    eval_parser.add_argument("--metric", required=True, choices=METRICS)
    eval_parser.add_argument("--out", metavar="PATH", help="write the report JSON here")
    _add_ensemble_flags(eval_parser)
    eval_parser.set_defaults(func=cmd_eval)

    sweep_parser = sub.add_parser("sweep", help="evaluate a grid of settings")
    sweep_parser.add_argument("--spec", required=True, metavar="PATH", help="sweep spec JSON")
    sweep_parser.add_argument("--dataset", metavar="PATH", help="override the spec's dataset")
    sweep_parser.add_argument(
        "--pool", metavar="PATH", help="base pool when the spec names no pool scenarios"
    )
    sweep_parser.add_argument("--out", metavar="PATH", help="write the CSV summary here")
    sweep_parser.add_argument("--workers", type=_positive_int, default=4, metavar="INT")
    sweep_parser.set_defaults(func=cmd_sweep)

    validate_parser = sub.add_parser("validate-pool", help="load a pool config and report it")
    validate_parser.add_argument("--pool", required=True, metavar="PATH")
    validate_parser.set_defaults(func=cmd_validate_pool)

    return parser


def _build_config(args: argparse.Namespace) -> EnsembleConfig:
    if args.max_words < args.span_length:
        raise ValueError("--max-words must be >= --span-length")
    return EnsembleConfig(
        span_length_words=args.span_length,
        lam=args.lam,
        filter_enabled=not args.no_filter,
        max_total_words=args.max_words,
    )


def cmd_run(args: argparse.Namespace) -> int:
    if args.prompt is not None:
        prompt = args.prompt
    else:
        prompt = Path(args.prompt_file).read_text(encoding="utf-8")
    if not prompt:
        raise ValueError("the prompt is empty")
    config = _build_config(args)
    pool = load_pool(args.pool, timeout_ms=args.timeout_ms)
    transcript = generate(pool, prompt, config, workers=args.workers)
    if args.trace:
        write_transcript(transcript, args.trace)
    print(transcript.final_text)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _build_config(args)
    pool = load_pool(args.pool, timeout_ms=args.timeout_ms)
    report = run_eval(
        args.dataset, pool, config, args.metric, workers=args.workers or 4
    )
    if args.out:
        Path(args.out).write_text(
            json.dumps(report.to_dict(), indent=2, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )
    print(f"{report.metric} {report.aggregate:.4f}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    spec = SweepSpec.from_file(args.spec)
    cells = run_sweep(spec, dataset=args.dataset, base_pool=args.pool, workers=args.workers)
    if args.out:
        write_sweep_csv(cells, args.out)
    else:
        sys.stdout.write(sweep_csv(cells))
    succeeded = sum(1 for cell in cells if cell.report is not None)
    if succeeded == 0:
        print("error: every sweep cell failed", file=sys.stderr)
        return 1
    failed = len(cells) - succeeded
    if failed:
        print(f"note: {failed} of {len(cells)} sweep cells failed", file=sys.stderr)
    return 0


def cmd_validate_pool(args: argparse.Namespace) -> int:
    pool = load_pool(args.pool)
    print(f"pool ok: {pool.n_models} models")
    for index, backend in enumerate(pool.models):
        if isinstance(backend, TableLM):
            kind = "table"
        elif isinstance(backend, HttpBackend):
            kind = "http"
        else:
            kind = type(backend).__name__
        print(f"  [{index}] {backend.name} ({kind})")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SpanEnsembleError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
