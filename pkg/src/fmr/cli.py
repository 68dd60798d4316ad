"""Command line: ``fmr run``, ``fmr bench`` and ``fmr launch``.

Exit status is 0 on success, 2 for configuration errors, 3 for transport
failures and 1 for any other job error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Sequence

from fmr.bench import CSV_COLUMNS, RunSpec, bench, launch_local_cluster, parse_gen, run, sweep_product
from fmr.core import ConfigError, FmrError
from fmr.engine import DEFAULT_CACHE_CAPACITY
from fmr.transport import TransportError
from fmr.transport.base import DEFAULT_COLLECTIVE_TIMEOUT, DEFAULT_CONNECT_TIMEOUT

EXIT_OK, EXIT_JOB, EXIT_CONFIG, EXIT_TRANSPORT = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise ConfigError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None


def _add_job_args(p: argparse.ArgumentParser, sweep: bool = False) -> None:
    p.add_argument("--job", required=True, help="wordcount, kmeans or pi" + (" (comma list)" if sweep else ""))
    p.add_argument("--mode", default="eager", help="eager or delayed" + (" (comma list)" if sweep else ""))
    p.add_argument("--workers", default="1" if sweep else 1, type=str if sweep else int)
    p.add_argument("--threads", default="1" if sweep else 1, type=str if sweep else int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cache-capacity", type=int, default=DEFAULT_CACHE_CAPACITY)
    p.add_argument("--k", type=int, default=None, help="k-means cluster count (default: generator centers)")
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--collective-timeout", type=float, default=DEFAULT_COLLECTIVE_TIMEOUT)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fmr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_run = sub.add_parser("run", help="run one job")
    _add_job_args(p_run)
    p_run.add_argument("--backend", default="inproc", choices=["inproc", "tcp"])
    p_run.add_argument("--cluster-file")
    p_run.add_argument("--rank", type=int)
    p_run.add_argument("--input", action="append", help="input file (repeatable)")
    p_run.add_argument("--gen", help="generator parameters, e.g. samples=1e6 or bytes=1048576,vocab=5000")
    p_run.add_argument("--out", help="result file (key<TAB>value per line, keys sorted)")
    p_run.add_argument("--report", help="write the JSON run report here instead of stdout")
    p_run.add_argument("--connect-timeout", type=float, default=DEFAULT_CONNECT_TIMEOUT)

    p_bench = sub.add_parser("bench", help="run a sweep in-process and emit CSV")
    _add_job_args(p_bench, sweep=True)
    p_bench.add_argument("--gen", action="append", help="generator parameters (repeat to sweep sizes)")
    p_bench.add_argument("--csv", help="CSV output path (default stdout)")

    p_launch = sub.add_parser("launch", help="run a job on a local multi-process TCP cluster")
    p_launch.add_argument("--workers", type=int, required=True)
    p_launch.add_argument("--timeout", type=float, default=None)
    p_launch.add_argument("args", nargs=argparse.REMAINDER, help="arguments passed to `fmr run`")
    return parser


def _cmd_run(ns: argparse.Namespace) -> int:
    spec = RunSpec(job=ns.job, mode=ns.mode, workers=ns.workers, threads=ns.threads, backend=ns.backend,
                   input=ns.input, gen=parse_gen(ns.gen) or None, seed=ns.seed, out=ns.out,
                   cache_capacity=ns.cache_capacity, k=ns.k, max_iters=ns.max_iters, tol=ns.tol,
                   cluster_file=ns.cluster_file, rank=ns.rank, connect_timeout=ns.connect_timeout,
                   collective_timeout=ns.collective_timeout)
    report = run(spec)
    if report is not None:
        if ns.report:
            with open(ns.report, "w", encoding="utf-8") as fh:
                fh.write(report.to_json() + "\n")
        else:
            print(report.to_json())
    return EXIT_OK


def _cmd_bench(ns: argparse.Namespace) -> int:
    gens = [parse_gen(g) for g in ns.gen] if ns.gen else [None]
    specs = sweep_product(ns.job.split(","), ns.mode.split(","), _int_list(ns.workers),
                          _int_list(ns.threads), gens, seed=ns.seed, cache_capacity=ns.cache_capacity,
                          k=ns.k, max_iters=ns.max_iters, tol=ns.tol,
                          collective_timeout=ns.collective_timeout)
    for spec in specs:
        spec.validate()
    if ns.csv:
        with open(ns.csv, "w", newline="", encoding="utf-8") as fh:
            reports = bench(specs, fh)
    else:
        reports = bench(specs, sys.stdout)
    return EXIT_OK if all(r.status == "ok" for r in reports) else EXIT_JOB


def _cmd_launch(ns: argparse.Namespace) -> int:
    args = list(ns.args)
    if args and args[0] == "--":
        args = args[1:]
    return launch_local_cluster(ns.workers, args, timeout=ns.timeout)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        ns = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        handler = {"run": _cmd_run, "bench": _cmd_bench, "launch": _cmd_launch}[ns.command]
        return handler(ns)
    except ConfigError as exc:
        print(f"fmr: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TransportError as exc:
        print(f"fmr: transport failure: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except FmrError as exc:
        print(f"fmr: job failed: {exc}", file=sys.stderr)
        return EXIT_JOB


__all__ = ["CSV_COLUMNS", "build_parser", "main"]
