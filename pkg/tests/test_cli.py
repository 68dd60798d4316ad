import csv
import io
import json
import os
import signal
import subprocess
import sys
import time

import psutil
import pytest

from fmr.bench import CSV_COLUMNS, RunSpec, bench, parse_gen, result_digest, run, sweep_product
from fmr.cli import main
from fmr.core import ConfigError

import oracles


def run_json(capsys, *argv):
    assert main(["run", *argv]) == 0
    return json.loads(capsys.readouterr().out)


def fmr_proc(*argv, timeout=120):
    return subprocess.run([sys.executable, "-m", "fmr", *argv], capture_output=True, text=True,
                          timeout=timeout)


def test_pi_pinned_estimate(capsys, tmp_path):
    out = tmp_path / "pi.tsv"
    report = run_json(capsys, "--job", "pi", "--gen", "samples=1e5", "--seed", "7", "--out", str(out))
    # value pinned from the first single-threaded run, confirmed by the scalar oracle
    assert report["result"] == {"estimate": 3.151, "inside": 78775, "samples": 100000}
    assert oracles.pi_inside(100_000, 7) == 78775
    assert report["result_digest"] == "49ad5dfffd0f31de"
    assert set(report["phases_ms"]) == {"map_ms", "shuffle_ms", "sort_ms", "reduce_ms", "total_ms"}
    assert all(v >= 0 for v in report["phases_ms"].values())
    assert out.read_text() == "estimate\t3.151\ninside\t78775\nsamples\t100000\n"


def test_wordcount_empty_file(capsys, tmp_path):
    empty = tmp_path / "empty.txt"
    empty.write_bytes(b"")
    out = tmp_path / "wc.tsv"
    report = run_json(capsys, "--job", "wordcount", "--input", str(empty), "--workers", "2",
                      "--out", str(out))
    assert report["result"]["distinct_words"] == 0
    assert report["pairs_shuffled"] == [0, 0]
    assert out.read_text() == ""


def test_wordcount_result_file(capsys, tmp_path):
    src = tmp_path / "doc.txt"
    src.write_text("The cat, the HAT.\nthe end\n")
    out = tmp_path / "wc.tsv"
    run_json(capsys, "--job", "wordcount", "--input", str(src), "--workers", "2", "--threads", "2",
             "--mode", "delayed", "--out", str(out))
    assert out.read_text() == "cat\t1\nend\t1\nhat\t1\nthe\t3\n"


def test_kmeans_result_file(capsys, tmp_path):
    src = tmp_path / "pts.txt"
    src.write_text("0 0\n0 2\n10 10\n10 12\n")
    out = tmp_path / "km.tsv"
    report = run_json(capsys, "--job", "kmeans", "--input", str(src), "--k", "2", "--out", str(out))
    assert report["result"]["converged"]
    assert out.read_text() == "0\t0.0 1.0\n1\t10.0 11.0\n"


def test_identical_runs_identical_results(capsys):
    a = run_json(capsys, "--job", "wordcount", "--gen", "bytes=50000", "--seed", "3", "--workers", "2")
    b = run_json(capsys, "--job", "wordcount", "--gen", "bytes=50000", "--seed", "3", "--workers", "2")
    assert a["result_digest"] == b["result_digest"] and a["result"] == b["result"]


@pytest.mark.parametrize("job,gen", [("wordcount", "bytes=60000"), ("kmeans", "points=300,dim=3,centers=4"),
                                     ("pi", "samples=2e5")])
def test_digest_invariant_across_topology_and_mode(job, gen):
    digests = set()
    for workers in (1, 2, 4):
        for threads in (1, 4):
            for mode in ("eager", "delayed"):
                spec = RunSpec(job=job, mode=mode, workers=workers, threads=threads, gen=parse_gen(gen), seed=1)
                digests.add(run(spec).result_digest)
    assert len(digests) == 1


def test_report_file(tmp_path):
    rep = tmp_path / "r.json"
    assert main(["run", "--job", "pi", "--gen", "samples=5000", "--report", str(rep)]) == 0
    data = json.loads(rep.read_text())
    assert data["spec"]["gen"] == {"samples": 5000}
    assert "records" not in data


def test_bench_pi_sweep_same_digest(capsys):
    assert main(["bench", "--job", "pi", "--workers", "1,2,4", "--gen", "samples=1e6"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == 3
    assert [r["workers"] for r in rows] == ["1", "2", "4"]
    assert {r["result_digest"] for r in rows} == {"43fbda6febefc5ee"}
    assert all(r["status"] == "ok" for r in rows)


def test_empty_sweep_header_only():
    buf = io.StringIO()
    assert bench([], buf) == []
    assert buf.getvalue() == ",".join(CSV_COLUMNS) + "\n"


def test_bench_failing_spec_recorded(tmp_path):
    buf = io.StringIO()
    specs = [RunSpec(job="kmeans", gen={"points": 2, "centers": 2}, k=5), RunSpec(job="pi", gen={"samples": 1000})]
    reports = bench(specs, buf)
    rows = list(csv.DictReader(io.StringIO(buf.getvalue())))
    assert rows[0]["status"].startswith("error: ConfigError")
    assert rows[1]["status"] == "ok"
    assert [r.status == "ok" for r in reports] == [False, True]


def test_bench_csv_file(tmp_path):
    path = tmp_path / "b.csv"
    assert main(["bench", "--job", "pi,wordcount", "--mode", "eager,delayed", "--gen", "samples=1e4,bytes=1e4",
                 "--csv", str(path)]) == 0
    rows = list(csv.DictReader(path.open()))
    assert [(r["job"], r["mode"]) for r in rows] == [
        ("pi", "eager"), ("pi", "delayed"), ("wordcount", "eager"), ("wordcount", "delayed")]


@pytest.mark.slow
def test_wordcount_size_sweep_monotone():
    gens = [{"bytes": mib << 20} for mib in (1, 2, 4)]
    reports = bench(sweep_product(["wordcount"], ["eager"], [2], [1], gens, seed=1))
    totals = [float(r.csv_row()["total_ms"]) for r in reports]
    assert [r.input_size <= (1 << 20) * m for r, m in zip(reports, (1, 2, 4))] == [True] * 3
    for smaller, larger in zip(totals, totals[1:]):
        assert larger >= 0.8 * smaller, totals


def test_exit_code_config_errors(capsys):
    assert main(["run", "--job", "nope"]) == 2
    assert main(["run", "--job", "pi", "--workers", "0"]) == 2
    assert main(["run", "--job", "pi", "--gen", "samples"]) == 2
    assert main(["run", "--job", "pi", "--backend", "tcp"]) == 2
    assert main(["run", "--job", "wordcount", "--input", "x", "--gen", "bytes=1"]) == 2
    assert main(["frobnicate"]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_exit_code_transport_failure(tmp_path, capsys):
    from fmr.transport import free_endpoints, write_cluster_file

    cluster = tmp_path / "cluster.txt"
    write_cluster_file(cluster, free_endpoints(2))
    code = main(["run", "--job", "pi", "--backend", "tcp", "--cluster-file", str(cluster), "--rank", "0",
                 "--connect-timeout", "0.5"])
    assert code == 3
    assert "transport failure" in capsys.readouterr().err


def test_exit_code_job_error(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_bytes(b"ok\n\xff\xfe\n")
    assert main(["run", "--job", "wordcount", "--input", str(bad)]) == 1
    assert "source element 1" in capsys.readouterr().err


def test_parse_gen():
    assert parse_gen("samples=1e6,dim=2") == {"samples": 1_000_000, "dim": 2}
    assert parse_gen("spread=0.5") == {"spread": 0.5}
    assert parse_gen(None) == {}
    with pytest.raises(ConfigError):
        parse_gen("x=abc")


def test_result_digest_order_independent():
    assert result_digest([("b", 1), ("a", 2)]) == result_digest([("a", 2), ("b", 1)])
    assert result_digest([]) == f"{0xCBF29CE484222325:016x}"


# launcher: real processes over loopback TCP


def _report_from(stdout):
    return json.loads(stdout)


def test_launch_single_worker():
    direct = fmr_proc("run", "--job", "pi", "--gen", "samples=1e5", "--seed", "7")
    launched = fmr_proc("launch", "--workers", "1", "--", "--job", "pi", "--gen", "samples=1e5", "--seed", "7")
    assert direct.returncode == launched.returncode == 0, launched.stderr
    assert _report_from(direct.stdout)["result"] == _report_from(launched.stdout)["result"]


def test_launch_two_workers_matches_inproc(tmp_path):
    out = tmp_path / "tcp.tsv"
    launched = fmr_proc("launch", "--workers", "2", "--", "--job", "pi", "--gen", "samples=1e5", "--seed", "7",
                        "--threads", "2", "--out", str(out))
    assert launched.returncode == 0, launched.stderr
    tcp_report = _report_from(launched.stdout)  # only rank 0 prints
    inproc = run(RunSpec(job="pi", workers=2, gen={"samples": 100000}, seed=7))
    assert tcp_report["result"] == inproc.result
    assert tcp_report["result_digest"] == inproc.result_digest
    assert tcp_report["spec"]["backend"] == "tcp"
    assert out.read_text() == "estimate\t3.151\ninside\t78775\nsamples\t100000\n"


def test_launch_wordcount_matches_inproc(tmp_path):
    src = tmp_path / "doc.txt"
    src.write_bytes(b"".join(f"line {i} word{i % 7} Word{i % 3}\n".encode() for i in range(500)))
    launched = fmr_proc("launch", "--workers", "2", "--", "--job", "wordcount", "--input", str(src),
                        "--mode", "delayed")
    assert launched.returncode == 0, launched.stderr
    inproc = run(RunSpec(job="wordcount", input=[str(src)]))
    assert _report_from(launched.stdout)["result_digest"] == inproc.result_digest


def test_launch_killed_child_nonzero():
    proc = subprocess.Popen([sys.executable, "-m", "fmr", "launch", "--workers", "2", "--", "--job", "pi",
                             "--gen", "samples=1e9", "--connect-timeout", "5", "--collective-timeout", "5"],
                            stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    try:
        launcher = psutil.Process(proc.pid)
        deadline = time.monotonic() + 30
        victim = None
        while victim is None and time.monotonic() < deadline:
            for child in launcher.children():
                if child.cmdline()[-2:] == ["--rank", "1"]:
                    victim = child
            time.sleep(0.05)
        assert victim is not None, "rank 1 never started"
        os.kill(victim.pid, signal.SIGKILL)
        code = proc.wait(timeout=90)
    finally:
        if proc.poll() is None:
            for child in psutil.Process(proc.pid).children(recursive=True):
                child.kill()
            proc.kill()
    assert code != 0
    assert code == 128 + signal.SIGKILL


def test_launch_config_error():
    res = fmr_proc("launch", "--workers", "0", "--", "--job", "pi")
    assert res.returncode == 2
