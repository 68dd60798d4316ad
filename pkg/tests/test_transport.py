import random
import socket
import struct
import threading
import time

import pytest

from fmr.core import ConfigError
from fmr.transport import (
    ClusterConfig, ContractError, StartupError, TransportError, cluster_init, free_endpoints,
    read_cluster_file, write_cluster_file,
)
from fmr.transport.tcp import MAGIC, encode_frame, init_tcp


def test_in_process_singleton():
    (h,) = cluster_init(ClusterConfig(1))
    assert (h.rank, h.size) == (0, 1)
    h.barrier()


def test_in_process_ranks():
    handles = cluster_init(ClusterConfig(4))
    assert [h.rank for h in handles] == [0, 1, 2, 3]
    assert {h.size for h in handles} == {4}


def test_tcp_pair_barrier(spmd):
    def fn(h):
        h.barrier()
        return h.size

    assert spmd(fn, 2, "tcp") == [2, 2]


def test_barrier_orders_timestamps(spmd, backend):
    def fn(h):
        time.sleep(0.02 * h.rank)
        before = time.monotonic()
        h.barrier()
        return before, time.monotonic()

    stamps = spmd(fn, 4, backend)
    assert max(b for b, _ in stamps) <= min(a for _, a in stamps)


def test_skipped_barrier_times_out(spmd, backend):
    def fn(h):
        if h.rank != 1:
            h.barrier()
        else:
            time.sleep(0.5)

    with pytest.raises(TransportError):
        spmd(fn, 3, backend, collective_timeout=0.3)


def test_mismatched_collectives_detected(spmd, backend):
    def fn(h):
        if h.rank == 0:
            h.barrier()
        else:
            h.all_to_all([b"x"] * h.size)

    with pytest.raises(TransportError):
        spmd(fn, 2, backend, collective_timeout=2.0)


def test_all_to_all_singleton(spmd):
    assert spmd(lambda h: h.all_to_all([b"B"]), 1) == [[b"B"]]


def test_all_to_all_empty(spmd, backend):
    assert spmd(lambda h: h.all_to_all([b""] * h.size), 3, backend) == [[b""] * 3] * 3


def test_all_to_all_pair_example(spmd, backend):
    sends = {0: [b"a", b"b"], 1: [b"c", b"d"]}
    assert spmd(lambda h: h.all_to_all(sends[h.rank]), 2, backend) == [[b"a", b"c"], [b"b", b"d"]]


def test_all_to_all_wrong_bucket_count(spmd):
    def fn(h):
        with pytest.raises(ContractError):
            h.all_to_all([b""])
        return h.collectives

    # contract violation is raised before anything is sent
    assert spmd(fn, 2) == [0, 0]


@pytest.mark.parametrize("n", [1, 2, 4])
def test_all_to_all_is_transpose(spmd, backend, n):
    def fn(h):
        rng = random.Random(h.rank)
        buckets = [rng.randbytes(rng.randrange(0, 50)) for _ in range(h.size)]
        assert h.all_to_all(h.all_to_all(buckets)) == buckets
        return True

    assert all(spmd(fn, n, backend))


@pytest.mark.parametrize("n", [1, 2, 4])
def test_byte_conservation(spmd, backend, n):
    def fn(h):
        rng = random.Random(10 + h.rank)
        h.all_to_all([rng.randbytes(rng.randrange(0, 100)) for _ in range(h.size)])
        h.gather(n - 1, b"z" * (h.rank + 1))
        h.broadcast(0, b"cfg" if h.rank == 0 else b"")
        return h.bytes_sent, h.bytes_received

    counters = spmd(fn, n, backend)
    assert sum(s for s, _ in counters) == sum(r for _, r in counters)


def test_gather_singleton(spmd):
    assert spmd(lambda h: h.gather(0, b"B"), 1) == [[b"B"]]


def test_gather_example(spmd, backend):
    payloads = [b"x", b"y", b"z"]
    assert spmd(lambda h: h.gather(1, payloads[h.rank]), 3, backend) == [[], payloads, []]


def test_gather_bad_root(spmd):
    def fn(h):
        with pytest.raises(ContractError):
            h.gather(h.size, b"")

    spmd(fn, 2)


def test_broadcast_examples(spmd, backend):
    assert spmd(lambda h: h.broadcast(0, b"solo"), 1) == [b"solo"]
    assert spmd(lambda h: h.broadcast(2, b"cfg" if h.rank == 2 else b""), 4, backend) == [b"cfg"] * 4
    assert spmd(lambda h: h.broadcast(1, b""), 3, backend) == [b""] * 3


def test_broadcast_bad_root(spmd):
    def fn(h):
        with pytest.raises(ContractError):
            h.broadcast(-1, b"")

    spmd(fn, 1)


def test_sixteen_mib_buckets(spmd, backend):
    big = 16 << 20

    def fn(h):
        buckets = [bytes([h.rank * 2 + d]) * big for d in range(h.size)]
        got = h.all_to_all(buckets)
        return [(len(b), b[:1], b[-1:]) for b in got]

    res = spmd(fn, 2, backend)
    for dst, got in enumerate(res):
        assert got == [(big, bytes([src * 2 + dst]), bytes([src * 2 + dst])) for src in range(2)]


def _collective_script(h):
    rng = random.Random(7 + h.rank)
    out = []
    for step in range(12):
        op = step % 4
        if op == 0:
            out.append(h.all_to_all([rng.randbytes(rng.randrange(20)) for _ in range(h.size)]))
        elif op == 1:
            out.append(h.gather(step % h.size, rng.randbytes(5)))
        elif op == 2:
            out.append(h.broadcast(step % h.size, rng.randbytes(7)))
        else:
            h.barrier()
    return out


@pytest.mark.parametrize("n", [1, 2, 3])
def test_backend_equivalence(spmd, n):
    assert spmd(_collective_script, n, "in_process") == spmd(_collective_script, n, "tcp")


def test_frame_layout():
    assert encode_frame(2, b"abc") == struct.pack("<IH", 5, 2) + b"abc"


def test_config_validation():
    with pytest.raises(ConfigError):
        ClusterConfig(0).validate()
    with pytest.raises(ConfigError):
        ClusterConfig(2, "tcp", ["127.0.0.1:1", "127.0.0.1:1"], 0).validate()
    with pytest.raises(ConfigError):
        ClusterConfig(2, "tcp", ["127.0.0.1:1", "127.0.0.1:2"], 2).validate()
    with pytest.raises(ConfigError):
        ClusterConfig(1, "tcp", ["nohostport"], 0).validate()
    with pytest.raises(ConfigError):
        ClusterConfig(1, "carrier-pigeon")


def test_unreachable_peer_named():
    eps = free_endpoints(2)
    with pytest.raises(StartupError, match=eps[1]):
        init_tcp(ClusterConfig(2, "tcp", eps, 0, connect_timeout=0.5))


def test_missing_lower_peer_named():
    eps = free_endpoints(2)
    with pytest.raises(StartupError, match=eps[0]):
        init_tcp(ClusterConfig(2, "tcp", eps, 1, connect_timeout=0.5))


def _dial(endpoint, rank):
    host, port = endpoint.rsplit(":", 1)
    for _ in range(200):
        try:
            s = socket.create_connection((host, int(port)))
            s.sendall(MAGIC + struct.pack("<H", rank))
            return s
        except OSError:
            time.sleep(0.01)
    raise RuntimeError("listener never came up")


def test_rank_collision():
    eps = free_endpoints(3)
    result = {}

    def top():
        try:
            init_tcp(ClusterConfig(3, "tcp", eps, 2, connect_timeout=5))
        except Exception as exc:  # noqa: BLE001
            result["exc"] = exc

    t = threading.Thread(target=top)
    t.start()
    a = _dial(eps[2], 0)
    b = _dial(eps[2], 0)
    t.join(10)
    a.close()
    b.close()
    assert isinstance(result.get("exc"), ConfigError)
    assert "collision" in str(result["exc"])


def test_bad_magic_is_ignored():
    eps = free_endpoints(2)
    got = {}

    def top():
        got["h"] = init_tcp(ClusterConfig(2, "tcp", eps, 1, connect_timeout=5))

    t = threading.Thread(target=top)
    t.start()
    host, port = eps[1].rsplit(":", 1)
    time.sleep(0.1)
    junk = socket.create_connection((host, int(port)))
    junk.sendall(b"HTTP/1.1")
    good = _dial(eps[1], 0)
    t.join(10)
    assert got["h"].size == 2
    got["h"].close()
    junk.close()
    good.close()


def test_peer_disconnect_is_transport_failure():
    eps = free_endpoints(2)
    handles = {}

    def start(r):
        handles[r] = init_tcp(ClusterConfig(2, "tcp", eps, r, connect_timeout=5, collective_timeout=5))

    ts = [threading.Thread(target=start, args=(r,)) for r in range(2)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    handles[1].close()
    with pytest.raises(TransportError):
        handles[0].barrier()
    handles[0].close()


def test_cluster_file_roundtrip(tmp_path):
    path = tmp_path / "cluster.txt"
    write_cluster_file(path, ["127.0.0.1:5000", "127.0.0.1:5001"])
    assert read_cluster_file(path) == ["127.0.0.1:5000", "127.0.0.1:5001"]
    (tmp_path / "empty.txt").write_text("\n")
    with pytest.raises(ConfigError):
        read_cluster_file(tmp_path / "empty.txt")
