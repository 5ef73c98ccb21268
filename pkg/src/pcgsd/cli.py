"""Command-line harness.

Exit codes: 0 success, 1 usage or configuration error, 2 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

from . import experiments as ex
from .asg_index import build_groups, load_embeddings, load_index, save_index, stats
from .errors import ConfigError, ConsistencyError, FormatError, PCGError

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list:
    return [int(v) for v in text.split(",") if v.strip()]


def _common(p: argparse.ArgumentParser, *, figure: bool = True) -> None:
    p.add_argument("--config", help="JSON experiment config; flags below override it")
    p.add_argument("--seed", type=int, help="single decode seed (replaces the config's seed list)")
    p.add_argument("--out", help="output file (default: stdout)")
    p.add_argument("--format", choices=("csv", "json"), default=None)
    p.add_argument("--preset", help="model pair preset")
    p.add_argument("--embeddings", help="PCGE embedding file for index construction")
    p.add_argument("--method", help="decoding method")
    p.add_argument("--theta", type=_floats, help="cosine threshold (comma list for sweep-theta)")
    p.add_argument("--lookahead", type=_ints, help="drafted tokens per round (comma list for sweep-lookahead)")
    p.add_argument("--bias", type=float, help="SSD constant acceptance bias")
    p.add_argument("--cost-ratio", type=float, help="draft/target cost ratio c")
    p.add_argument("--temperature", type=float)
    p.add_argument("--trials", type=int, help="Monte Carlo trials per instance")
    p.add_argument("--length", type=int, help="tokens generated per run")
    p.add_argument("--workers", type=int, help="process pool size for sweep points")
    if figure:
        p.add_argument("--figure", help="also render a PNG figure to this path")


THETA_EPILOG = "CSV columns: " + ", ".join(ex.THETA_COLUMNS)
LOOKAHEAD_EPILOG = "CSV columns: " + ", ".join(ex.LOOKAHEAD_COLUMNS)
BENCH_EPILOG = "CSV columns: " + ", ".join(("method",) + ex.BENCH_COLUMNS)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pcgsd", description="Group-level (PCG) speculative decoding harness.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-index", help="build a group index from embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--theta", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prenormalized", action="store_true", help="rows are already unit norm")
    p.add_argument("--block-size", type=int, default=1024)

    p = sub.add_parser("index-stats", help="group counts and storage estimate of an index file")
    p.add_argument("--index", required=True)
    p.add_argument("--id-bytes", type=int, choices=(2, 4), default=4)
    p.add_argument("--format", choices=("csv", "json"), default="json")
    p.add_argument("--out")

    p = sub.add_parser("verify", help="run the exactness and coupling suites")
    _common(p, figure=False)
    p.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    p.add_argument("--instances", type=int)

    _common(sub.add_parser("sweep-theta", help="acceptance and speedup over thresholds",
                           epilog=THETA_EPILOG))
    _common(sub.add_parser("sweep-lookahead", help="tokens/round and speedup over lookahead",
                           epilog=LOOKAHEAD_EPILOG))
    _common(sub.add_parser("bench", help="compare target-only, SD, SSD and PCG", epilog=BENCH_EPILOG))
    return parser


def resolve_config(args, sweep: str = "") -> ex.ExperimentConfig:
    config = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    overrides = {
        "preset": args.preset, "embeddings": args.embeddings, "method": args.method,
        "bias": args.bias, "cost_ratio": args.cost_ratio, "temperature": args.temperature,
        "trials": args.trials, "length": args.length, "workers": args.workers,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(config, key, value)
    if args.seed is not None:
        config.seeds = (args.seed,)
    if args.theta is not None:
        if sweep == "theta":
            config.thetas = tuple(args.theta)
        elif len(args.theta) == 1:
            config.theta = args.theta[0]
        else:
            raise ConfigError("--theta takes a single value here")
    if args.lookahead is not None:
        if sweep == "lookahead":
            config.lookaheads = tuple(args.lookahead)
        elif len(args.lookahead) == 1:
            config.lookahead = args.lookahead[0]
        else:
            raise ConfigError("--lookahead takes a single value here")
    if getattr(args, "suite", None):
        config.suites = tuple(args.suite)
    if getattr(args, "instances", None) is not None:
        config.instances = args.instances
    return config.validate()


def _cell(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return "" if v is None else str(v)


def render_csv(rows, columns, config: dict | None = None) -> str:
    buf = io.StringIO()
    if config is not None:
        buf.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r[c]) for c in columns])
    return buf.getvalue()


def render_json(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_build_index(args) -> int:
    emb = load_embeddings(args.embeddings, prenormalized=args.prenormalized)
    index = build_groups(emb, args.theta, block_size=args.block_size)
    save_index(index, args.out)
    sys.stdout.write(render_json(stats(index).as_dict()))
    return EXIT_OK


def cmd_index_stats(args) -> int:
    st = stats(load_index(args.index), id_bytes=args.id_bytes).as_dict()
    if args.format == "csv":
        _emit(render_csv([st], tuple(st)), args.out)
    else:
        _emit(render_json(st), args.out)
    return EXIT_OK


def cmd_verify(args) -> int:
    config = resolve_config(args)
    report = ex.run_verification(config)
    _emit(render_json(report), args.out)
    for r in report["suites"]:
        status = "PASS" if r["passed"] else "FAIL"
        sys.stderr.write(f"{status} {r['suite']}: {r['metric']:.3g} (threshold {r['threshold']:.3g})\n")
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def _sweep(args, kind: str) -> int:
    config = resolve_config(args, kind)
    if kind == "theta":
        rows, columns = ex.sweep_theta(config), ex.THETA_COLUMNS
    else:
        rows, columns = ex.sweep_lookahead(config), ex.LOOKAHEAD_COLUMNS
    if (args.format or "csv") == "csv":
        _emit(render_csv(rows, columns, config.to_dict()), args.out)
    else:
        _emit(render_json({"config": config.to_dict(), "rows": rows}), args.out)
    if args.figure:
        from . import plotting

        (plotting.plot_theta_sweep if kind == "theta" else plotting.plot_lookahead_sweep)(rows, args.figure)
    return EXIT_OK


def cmd_bench(args) -> int:
    config = resolve_config(args)
    summary = ex.bench(config)
    if (args.format or "json") == "csv":
        rows = [{"method": m, **v} for m, v in summary["methods"].items()]
        _emit(render_csv(rows, ("method",) + ex.BENCH_COLUMNS, config.to_dict()), args.out)
    else:
        _emit(render_json(summary), args.out)
    if args.figure:
        from . import plotting

        plotting.plot_bench(summary, args.figure)
    return EXIT_OK


COMMANDS = {
    "build-index": cmd_build_index,
    "index-stats": cmd_index_stats,
    "verify": cmd_verify,
    "sweep-theta": lambda a: _sweep(a, "theta"),
    "sweep-lookahead": lambda a: _sweep(a, "lookahead"),
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FormatError, ConsistencyError, FileNotFoundError, ValueError, PCGError) as exc:
        sys.stderr.write(f"pcgsd {args.command}: error: {exc}\n")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
