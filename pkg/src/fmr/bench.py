"""Job runner, sweep harness and local multi-process launcher."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import os
import resource
import signal
import subprocess
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence, TextIO

from fmr.core import (
    F64VEC, FLOAT64, INT64, TEXT, ConfigError, canonical_bytes, encode_kv, fnv1a64,
)
from fmr.dist import DistVector, block_bounds
from fmr.engine import DEFAULT_CACHE_CAPACITY, JobMode, PhaseStats
from fmr.jobs import gaussian_blobs, kmeans, load_lines, pi_counts, wordcount, zipf_corpus
from fmr.jobs.kmeans import parse_points
from fmr.jobs.wordcount import read_lines_for_rank
from fmr.transport import (
    ClusterConfig, ClusterHandle, cluster_init, free_endpoints, read_cluster_file, run_spmd,
    write_cluster_file,
)
from fmr.transport.base import DEFAULT_COLLECTIVE_TIMEOUT, DEFAULT_CONNECT_TIMEOUT

log = logging.getLogger(__name__)

JOBS = ("wordcount", "kmeans", "pi")

GEN_DEFAULTS: dict[str, dict[str, float]] = {
    "wordcount": {"bytes": 1 << 20, "vocab": 5000, "exponent": 1.1},
    "kmeans": {"points": 200, "dim": 2, "centers": 3},
    "pi": {"samples": 10**6},
}

CSV_COLUMNS = ("job", "mode", "workers", "threads", "input_size", "map_ms", "shuffle_ms", "sort_ms",
               "reduce_ms", "total_ms", "pairs_shuffled", "peak_rss_bytes", "result_digest", "status")


def parse_gen(text: str | None) -> dict[str, float]:
    """``"samples=1e7,foo=2"`` -> ``{"samples": 10000000, "foo": 2}``."""
    out: dict[str, float] = {}
    if not text:
        return out
    for item in text.split(","):
        name, sep, raw = item.partition("=")
        if not sep or not name.strip():
            raise ConfigError(f"generator parameter {item!r} is not name=value")
        try:
            value = float(raw)
        except ValueError:
            raise ConfigError(f"generator parameter {name}={raw!r} is not a number") from None
        out[name.strip()] = int(value) if value.is_integer() else value
    return out


@dataclass
class RunSpec:
    job: str
    mode: str = "eager"
    workers: int = 1
    threads: int = 1
    backend: str = "inproc"
    input: list[str] | None = None
    gen: dict[str, float] | None = None
    seed: int = 0
    out: str | None = None
    cache_capacity: int = DEFAULT_CACHE_CAPACITY
    k: int | None = None
    max_iters: int = 100
    tol: float = 1e-6
    cluster_file: str | None = None
    rank: int | None = None
    connect_timeout: float = DEFAULT_CONNECT_TIMEOUT
    collective_timeout: float = DEFAULT_COLLECTIVE_TIMEOUT

    def validate(self) -> None:
        if self.job not in JOBS:
            raise ConfigError(f"unknown job {self.job!r}; expected one of {', '.join(JOBS)}")
        try:
            JobMode(self.mode)
        except ValueError:
            raise ConfigError(f"unknown mode {self.mode!r}") from None
        if self.workers < 1 or self.threads < 1:
            raise ConfigError("workers and threads must both be >= 1")
        if self.cache_capacity < 1:
            raise ConfigError("cache capacity must be >= 1")
        if self.input and self.gen:
            raise ConfigError("--input and --gen are mutually exclusive")
        if self.job == "pi" and self.input:
            raise ConfigError("pi takes no input file; use --gen samples=N")
        if self.backend not in ("inproc", "in_process", "tcp"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.backend == "tcp" and (self.cluster_file is None or self.rank is None):
            raise ConfigError("tcp backend needs --cluster-file and --rank")

    def gen_params(self) -> dict[str, float]:
        params = dict(GEN_DEFAULTS[self.job])
        params.update(self.gen or {})
        return params

    def echo(self) -> dict[str, Any]:
        d = asdict(self)
        if not self.input:
            d["gen"] = self.gen_params()
        return d


@dataclass
class RunReport:
    spec: dict[str, Any]
    phases_ms: dict[str, float]
    wall_ms: float
    input_size: int
    pairs_shuffled: list[int]
    peak_rss_bytes: list[int]
    result: dict[str, Any]
    result_digest: str
    status: str = "ok"
    records: list[tuple[Any, Any]] = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("records")
        return json.dumps(d, indent=2, sort_keys=True)

    def csv_row(self) -> dict[str, Any]:
        p = self.phases_ms
        return {
            "job": self.spec["job"], "mode": self.spec["mode"], "workers": self.spec["workers"],
            "threads": self.spec["threads"], "input_size": self.input_size,
            "map_ms": f"{p['map_ms']:.3f}", "shuffle_ms": f"{p['shuffle_ms']:.3f}",
            "sort_ms": f"{p['sort_ms']:.3f}", "reduce_ms": f"{p['reduce_ms']:.3f}",
            "total_ms": f"{p['total_ms']:.3f}", "pairs_shuffled": sum(self.pairs_shuffled),
            "peak_rss_bytes": max(self.peak_rss_bytes, default=0),
            "result_digest": self.result_digest, "status": self.status,
        }


def _value_bytes(value: Any) -> bytes:
    if isinstance(value, bool):
        raise TypeError("bool result values are not supported")
    if isinstance(value, int):
        return INT64.encode(value)
    if isinstance(value, float):
        return FLOAT64.encode(value)
    if isinstance(value, str):
        return TEXT.encode(value)
    return F64VEC.encode(value)


def result_digest(records: Iterable[tuple[Any, Any]]) -> str:
    """FNV-1a 64 over the encoded, key-sorted result pairs, as 16 hex digits."""
    ordered = sorted(records, key=lambda kv: kv[0])
    blob = b"".join(encode_kv(canonical_bytes(k), _value_bytes(v)) for k, v in ordered)
    return f"{fnv1a64(blob):016x}"


def _format_value(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return " ".join(repr(float(x)) for x in value)
    return str(value)


def write_records(records: Iterable[tuple[Any, Any]], fh: TextIO) -> None:
    for key, value in sorted(records, key=lambda kv: kv[0]):
        fh.write(f"{key}\t{_format_value(value)}\n")


def peak_rss_bytes() -> int:
    # ru_maxrss is KiB on Linux, bytes on macOS
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return rss if sys.platform == "darwin" else rss * 1024


def _run_job(handle: ClusterHandle, spec: RunSpec) -> tuple[list, PhaseStats, int, dict[str, Any]]:
    mode = JobMode(spec.mode)
    params = spec.gen_params()
    rank, size = handle.rank, handle.size

    if spec.job == "wordcount":
        if spec.input:
            lines = load_lines(handle, paths=spec.input)
            input_size = sum(os.path.getsize(p) for p in spec.input)
        else:
            data = zipf_corpus(int(params["bytes"]), seed=spec.seed, vocab_size=int(params["vocab"]),
                               exponent=float(params["exponent"]))
            lines = load_lines(handle, data=data)
            input_size = len(data)
        counts = wordcount(lines, mode, spec.threads, spec.cache_capacity)
        gathered = counts.gather(0)
        return list(gathered.items()), counts.stats, input_size, {"distinct_words": len(gathered),
                                                                  "total_words": sum(gathered.values())}

    if spec.job == "kmeans":
        if spec.input:
            local = parse_points(read_lines_for_rank(spec.input, rank, size))
            points = DistVector.from_local(handle, local)
        else:
            n = int(params["points"])
            allpts = gaussian_blobs(n, int(params["dim"]), int(params["centers"]), seed=spec.seed)
            start, stop = block_bounds(n, size, rank)
            points = DistVector(handle, allpts[start:stop], n, start)
        k = spec.k if spec.k is not None else int(params.get("centers", 3))
        state = kmeans(points, k, max_iters=spec.max_iters, tol=spec.tol, threads=spec.threads,
                       mode=mode, cache_capacity=spec.cache_capacity)
        records = list(enumerate(state.centroids)) if rank == 0 else []
        return records, state.stats, points.global_len, {
            "iterations": state.iteration, "shift": state.shift, "converged": state.converged}

    total = int(params["samples"])
    counts = pi_counts(handle, total, spec.seed, mode, spec.threads, cache_capacity=spec.cache_capacity)
    inside = counts.get(0) or 0
    estimate = 4.0 * inside / total
    records = [("estimate", estimate), ("inside", inside), ("samples", total)] if rank == 0 else []
    return records, counts.stats, total, {"estimate": estimate, "inside": inside, "samples": total}


def _worker(handle: ClusterHandle, spec: RunSpec) -> RunReport | None:
    handle.barrier()
    t0 = time.perf_counter()
    records, stats, input_size, summary = _run_job(handle, spec)
    handle.barrier()
    wall_ms = (time.perf_counter() - t0) * 1e3
    per_worker = handle.allgather_obj((stats.pairs_shuffled, peak_rss_bytes()))
    if handle.rank != 0:
        return None
    phases = {"map_ms": stats.map_ms, "shuffle_ms": stats.shuffle_ms, "sort_ms": stats.sort_ms,
              "reduce_ms": stats.reduce_ms, "total_ms": stats.total_ms}
    return RunReport(spec=spec.echo(), phases_ms=phases, wall_ms=wall_ms, input_size=input_size,
                     pairs_shuffled=[p for p, _ in per_worker], peak_rss_bytes=[m for _, m in per_worker],
                     result=summary, result_digest=result_digest(records), records=records)


def run(spec: RunSpec) -> RunReport | None:
    """Execute ``spec``; returns the report on rank 0 and ``None`` elsewhere.

    Rank 0 also writes the key-sorted result to ``spec.out`` when set.
    """
    spec.validate()
    if spec.backend == "tcp":
        endpoints = read_cluster_file(spec.cluster_file)
        if spec.workers not in (1, len(endpoints)):
            raise ConfigError(f"--workers {spec.workers} disagrees with {len(endpoints)} endpoints")
        spec.workers = len(endpoints)
        config = ClusterConfig(len(endpoints), "tcp", endpoints, spec.rank,
                               spec.connect_timeout, spec.collective_timeout)
        (handle,) = cluster_init(config)
        try:
            report = _worker(handle, spec)
        finally:
            handle.close()
    else:
        report = run_spmd(lambda h: _worker(h, spec), spec.workers, "in_process",
                          collective_timeout=spec.collective_timeout)[0]
    if report is not None and spec.out:
        with open(spec.out, "w", encoding="utf-8") as fh:
            write_records(report.records, fh)
    return report


def _error_report(spec: RunSpec, exc: BaseException) -> RunReport:
    zero = {"map_ms": 0.0, "shuffle_ms": 0.0, "sort_ms": 0.0, "reduce_ms": 0.0, "total_ms": 0.0}
    return RunReport(spec=asdict(spec), phases_ms=zero, wall_ms=0.0, input_size=0, pairs_shuffled=[],
                     peak_rss_bytes=[], result={}, result_digest="",
                     status=f"error: {type(exc).__name__}: {exc}")


def bench(sweep: Sequence[RunSpec], out: TextIO | None = None) -> list[RunReport]:
    """Run every spec in order on the in-process backend, one CSV row each.

    A failing spec becomes a row whose ``status`` holds the error; the
    sweep carries on.
    """
    writer = None
    if out is not None:
        writer = csv.DictWriter(out, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
    reports = []
    for spec in sweep:
        spec.backend = "inproc"
        try:
            report = run(spec)
        except Exception as exc:  # noqa: BLE001 - recorded in the row
            log.warning("bench run %s failed: %s", spec, exc)
            report = _error_report(spec, exc)
        reports.append(report)
        if writer is not None:
            writer.writerow(report.csv_row())
            out.flush()
    return reports


def sweep_product(jobs: Sequence[str], modes: Sequence[str], workers: Sequence[int],
                  threads: Sequence[int], gens: Sequence[dict | None], **common) -> list[RunSpec]:
    return [RunSpec(job=j, mode=m, workers=w, threads=t, gen=g, **common)
            for j, g, m, w, t in itertools.product(jobs, gens, modes, workers, threads)]


def bench_csv(reports: Sequence[RunReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.csv_row())
    return buf.getvalue()


def _exit_code(returncode: int) -> int:
    return 128 - returncode if returncode < 0 else returncode


def launch_local_cluster(workers: int, program_args: Sequence[str], python: str = sys.executable,
                         timeout: float | None = None) -> int:
    """Start ``workers`` TCP worker processes on loopback; returns the worst exit status."""
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    with tempfile.TemporaryDirectory(prefix="fmr-cluster-") as tmp:
        cluster_file = Path(tmp) / "cluster.txt"
        write_cluster_file(cluster_file, free_endpoints(workers))
        children: list[subprocess.Popen] = []
        try:
            for rank in range(workers):
                cmd = [python, "-m", "fmr", "run", *program_args, "--backend", "tcp",
                       "--workers", str(workers), "--cluster-file", str(cluster_file), "--rank", str(rank)]
                children.append(subprocess.Popen(cmd))
        except OSError:
            for child in children:
                child.kill()
            for child in children:
                child.wait()
            raise
        deadline = None if timeout is None else time.monotonic() + timeout
        codes = []
        for child in children:
            try:
                remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
                codes.append(child.wait(remaining))
            except subprocess.TimeoutExpired:
                for other in children:
                    if other.poll() is None:
                        other.send_signal(signal.SIGTERM)
                codes.append(child.wait())
        return max(_exit_code(c) for c in codes)
