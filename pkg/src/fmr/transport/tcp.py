"""Full-mesh TCP backend, one OS process (or thread) per worker.

Connection setup is rank ordered: each worker listens on its own endpoint,
connects to every higher rank and accepts from every lower rank.  The
connecting side opens with the handshake ``b"FMR1" + u16 rank``.

Frames are ``[u32 LE length][u16 LE tag][payload]`` where the length counts
the tag and payload bytes that follow it.
"""

from __future__ import annotations

import logging
import socket
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

from fmr.core import ConfigError
from fmr.transport.base import (
    ClusterConfig,
    ClusterHandle,
    StartupError,
    Tag,
    TransportError,
    split_endpoint,
)

log = logging.getLogger(__name__)

MAGIC = b"FMR1"
_HANDSHAKE = struct.Struct("<4sH")
_HEADER = struct.Struct("<IH")
MAX_PAYLOAD = 0xFFFFFFFF - 2


def _recv_exact(sock: socket.socket, n: int) -> bytearray:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise ConnectionError("peer closed the connection")
        got += k
    return buf


def encode_frame(tag: int, payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise TransportError(f"payload of {len(payload)} bytes exceeds frame limit")
    return _HEADER.pack(len(payload) + 2, tag) + payload


def _recv_frame(sock: socket.socket) -> tuple[int, bytes]:
    length, tag = _HEADER.unpack(_recv_exact(sock, _HEADER.size))
    if length < 2:
        raise TransportError(f"frame length {length} shorter than its tag")
    return tag, bytes(_recv_exact(sock, length - 2))


class TcpHandle(ClusterHandle):
    def __init__(self, rank: int, size: int, peers: dict[int, socket.socket],
                 listener: socket.socket, collective_timeout: float) -> None:
        super().__init__(rank, size, collective_timeout)
        self._peers = peers
        self._listener = listener
        for sock in peers.values():
            sock.settimeout(collective_timeout)
        self._pool = ThreadPoolExecutor(max_workers=max(1, size - 1),
                                        thread_name_prefix=f"fmr-send-{rank}")
        self._closed = False

    def _send(self, peer: int, frame: bytes) -> None:
        self._peers[peer].sendall(frame)

    def _exchange(self, tag: Tag, outgoing: dict[int, bytes], sources: Sequence[int]) -> dict[int, bytes]:
        if self._closed:
            raise TransportError(f"rank {self.rank}: handle is closed")
        sends = [self._pool.submit(self._send, p, encode_frame(tag, payload))
                 for p, payload in outgoing.items() if p != self.rank]
        incoming: dict[int, bytes] = {}
        try:
            for src in sources:
                if src == self.rank:
                    incoming[src] = outgoing[src]
                    continue
                got_tag, payload = _recv_frame(self._peers[src])
                if got_tag != tag:
                    raise TransportError(
                        f"rank {self.rank}: expected {tag.name} from rank {src}, "
                        f"got tag {got_tag} (mismatched collective calls)")
                incoming[src] = payload
            for fut in sends:
                fut.result()
        except (OSError, ConnectionError) as exc:
            raise TransportError(f"rank {self.rank}: {tag.name} failed: {exc}") from exc
        return incoming

    def abort(self) -> None:
        self.close()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        for sock in self._peers.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        self._listener.close()
        self._pool.shutdown(wait=False)


def _connect(endpoint: str, deadline: float) -> socket.socket:
    host, port = split_endpoint(endpoint)
    delay = 0.01
    while True:
        try:
            return socket.create_connection((host, port), timeout=max(0.05, deadline - time.monotonic()))
        except OSError:
            if time.monotonic() + delay >= deadline:
                raise
            time.sleep(delay)
            delay = min(delay * 2, 0.25)


def init_tcp(config: ClusterConfig) -> TcpHandle:
    config.validate()
    rank, size = config.rank, config.num_workers
    deadline = time.monotonic() + config.connect_timeout
    host, port = split_endpoint(config.endpoints[rank])
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        listener.bind((host, port))
    except OSError as exc:
        listener.close()
        raise StartupError(f"rank {rank}: cannot listen on {config.endpoints[rank]}: {exc}") from exc
    listener.listen(size)

    peers: dict[int, socket.socket] = {}

    def fail(exc_type, msg: str):
        for s in peers.values():
            s.close()
        listener.close()
        return exc_type(msg)

    for peer in range(rank + 1, size):
        try:
            sock = _connect(config.endpoints[peer], deadline)
        except OSError:
            missing = [config.endpoints[p] for p in range(rank + 1, size) if p not in peers]
            raise fail(StartupError, f"rank {rank}: unreachable peers {missing} "
                                     f"after {config.connect_timeout}s") from None
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.sendall(_HANDSHAKE.pack(MAGIC, rank))
        peers[peer] = sock

    while len(peers) < size - 1:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            missing = [config.endpoints[p] for p in range(rank) if p not in peers]
            raise fail(StartupError, f"rank {rank}: no connection from peers {missing} "
                                     f"after {config.connect_timeout}s")
        listener.settimeout(remaining)
        try:
            sock, _ = listener.accept()
            sock.settimeout(max(0.05, deadline - time.monotonic()))
            magic, peer = _HANDSHAKE.unpack(_recv_exact(sock, _HANDSHAKE.size))
        except socket.timeout:
            continue
        except (OSError, ConnectionError) as exc:
            log.warning("rank %d: dropped bad connection attempt: %s", rank, exc)
            continue
        if magic != MAGIC:
            sock.close()
            log.warning("rank %d: dropped connection with bad magic %r", rank, magic)
            continue
        if peer >= rank or peer in peers:
            sock.close()
            raise fail(ConfigError, f"rank {rank}: rank collision, peer announced rank {peer}")
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        peers[peer] = sock

    return TcpHandle(rank, size, peers, listener, config.collective_timeout)
