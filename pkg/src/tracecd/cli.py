"""Command-line entry point: ``tracecd <command> [flags]``.

Exit codes: 0 success, 2 parameter error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict

from . import harness
from .density import TrainingError
from .scm import InputError, ParameterError

EXIT_OK, EXIT_PARAM, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _lag(value: str):
    if value == "full":
        return None
    try:
        m = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a positive integer or 'full'")
    if m < 1:
        raise argparse.ArgumentTypeError("sparse lag must be >= 1")
    return m


def _context(value: str):
    return None if value == "auto" else int(value)


def _values(value: str):
    return [json.loads(v) for v in value.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", help="experiment spec JSON (defaults to the desk preset)")
    common.add_argument("--preset", choices=sorted(harness.PRESETS), help="start from a named preset")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--backend", choices=["exact", "loglinear"])
    common.add_argument("--checkpoint", help="log-linear checkpoint file (default: latest in OUT)")
    common.add_argument("--sparse-lag", type=_lag, default=argparse.SUPPRESS, metavar="M|full",
                        help="maximum lag for the sparse variant, or 'full'")
    common.add_argument("--particles", type=int, help="Monte-Carlo particles N")
    common.add_argument("--threshold", type=float, help="edge threshold tau (nats)")
    common.add_argument("--context", type=_context, default=argparse.SUPPRESS, metavar="C|auto",
                        help="fixed context length, or 'auto'")
    common.add_argument("--aggregation", choices=["avg-then-kl", "kl-then-avg"])
    common.add_argument("--workers", type=int)
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = argparse.ArgumentParser(prog="tracecd", description="Causal discovery on single event sequences.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="sample an SCM and train/val/eval sequences")
    sub.add_parser("train", parents=[common], help="fit the log-linear backend with checkpoints")
    d = sub.add_parser("discover", parents=[common], help="instance and summary graphs per sequence")
    d.add_argument("--sequences", help="sequence JSONL file (default: OUT/sequences/eval.jsonl)")
    d.add_argument("--dump-report", action="store_true", help="also write per-pair scores")
    sub.add_parser("eval", parents=[common], help="TRACE and baselines against ground truth")
    s = sub.add_parser("sweep", parents=[common], help="metrics over one parameter grid")
    s.add_argument("--axis", choices=harness.SWEEP_AXES)
    s.add_argument("--values", type=_values, help="comma-separated grid values")
    sub.add_parser("bench", parents=[common], help="op counts of sparse vs full discovery")
    e = sub.add_parser("export-dot", parents=[common], help="render a graph JSON file as DOT")
    e.add_argument("graph", help="instance or summary graph JSON")
    e.add_argument("dot", help="destination DOT file")
    sub.add_parser("show-spec", parents=[common], help="print the resolved spec")
    return p


def resolve_spec(args) -> harness.ExperimentSpec:
    if args.spec:
        spec = harness.ExperimentSpec.load(args.spec)
    else:
        spec = harness.preset(args.preset or "desk")
    d = spec.to_dict()
    for flag, key in (("seed", "seed"), ("out", "out"), ("backend", "backend"), ("workers", "workers")):
        if getattr(args, flag, None) is not None:
            d[key] = getattr(args, flag)
    trace = d["trace"]
    if args.particles is not None:
        trace["n_particles"] = args.particles
    if args.threshold is not None:
        trace["threshold"] = args.threshold
    if args.aggregation is not None:
        trace["aggregation"] = args.aggregation
    if hasattr(args, "sparse_lag"):
        trace["max_lag"] = args.sparse_lag
    if hasattr(args, "context"):
        trace["context_len"] = args.context
    if getattr(args, "axis", None) is not None:
        d["sweep"]["axis"] = args.axis
    if getattr(args, "values", None) is not None:
        d["sweep"]["values"] = args.values
    return harness.ExperimentSpec.from_dict(d)


def run(args) -> object:
    if args.command == "export-dot":
        return harness.cmd_export_dot(args.graph, args.dot, force=args.force)
    spec = resolve_spec(args)
    if args.command == "show-spec":
        return asdict(spec)
    if args.command == "generate":
        return harness.cmd_generate(spec, force=args.force)
    if args.command == "train":
        return harness.cmd_train(spec, force=args.force)
    if args.command == "discover":
        return harness.cmd_discover(spec, args.checkpoint, args.sequences, force=args.force,
                                    dump_report=args.dump_report)
    if args.command == "eval":
        return harness.cmd_eval(spec, args.checkpoint, force=args.force)
    if args.command == "sweep":
        return harness.cmd_sweep(spec, force=args.force)
    if args.command == "bench":
        return harness.cmd_bench(spec, force=args.force)
    raise ParameterError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_PARAM
    try:
        result = run(args)
    except (TrainingError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParameterError, InputError, TypeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARAM
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    print(json.dumps(result, sort_keys=True, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
