"""Backend-independent collective interface."""

from __future__ import annotations

import enum
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from fmr.core import ConfigError, FmrError

DEFAULT_CONNECT_TIMEOUT = 30.0
DEFAULT_COLLECTIVE_TIMEOUT = 120.0


class TransportError(FmrError):
    """A peer vanished, a collective timed out, or calls were mismatched."""


class StartupError(TransportError):
    """The cluster could not be assembled within the connect timeout."""


class ContractError(FmrError, ValueError):
    """A collective was called with arguments that violate its contract."""


class Tag(enum.IntEnum):
    BARRIER = 1
    ALL_TO_ALL = 2
    GATHER = 3
    BROADCAST = 4


BACKEND_ALIASES = {"in_process": "in_process", "inproc": "in_process", "tcp": "tcp"}


@dataclass
class ClusterConfig:
    num_workers: int
    backend: str = "in_process"
    endpoints: Sequence[str] = field(default_factory=tuple)
    rank: int | None = None
    connect_timeout: float = DEFAULT_CONNECT_TIMEOUT
    collective_timeout: float = DEFAULT_COLLECTIVE_TIMEOUT

    def __post_init__(self) -> None:
        if self.backend not in BACKEND_ALIASES:
            raise ConfigError(f"unknown backend {self.backend!r}")
        self.backend = BACKEND_ALIASES[self.backend]
        self.endpoints = tuple(self.endpoints)

    def validate(self) -> None:
        if self.num_workers < 1:
            raise ConfigError(f"num_workers must be >= 1, got {self.num_workers}")
        if self.backend != "tcp":
            return
        if len(self.endpoints) != self.num_workers:
            raise ConfigError(
                f"tcp backend needs {self.num_workers} endpoints, got {len(self.endpoints)}")
        if len(set(self.endpoints)) != len(self.endpoints):
            raise ConfigError("tcp endpoints must be distinct")
        if self.rank is None or not 0 <= self.rank < self.num_workers:
            raise ConfigError(f"rank {self.rank} outside [0, {self.num_workers})")
        for ep in self.endpoints:
            split_endpoint(ep)


def split_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ConfigError(f"endpoint {endpoint!r} is not host:port")
    return host, int(port)


def read_cluster_file(path: str | Path) -> list[str]:
    """One ``host:port`` per non-blank line; the line index is the rank."""
    lines = Path(path).read_text().splitlines()
    endpoints = [ln.strip() for ln in lines if ln.strip()]
    if not endpoints:
        raise ConfigError(f"cluster file {path} lists no endpoints")
    return endpoints


def write_cluster_file(path: str | Path, endpoints: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{ep}\n" for ep in endpoints))


class ClusterHandle:
    """One worker's view of the cluster.

    Every collective is built on :meth:`_exchange`, which a backend
    implements as "send these payloads, then receive from these sources".
    Calls are matched purely by order, so all workers must issue the same
    sequence of collectives.
    """

    def __init__(self, rank: int, size: int, collective_timeout: float) -> None:
        self.rank = rank
        self.size = size
        self.collective_timeout = collective_timeout
        self.bytes_sent = 0
        self.bytes_received = 0
        self.collectives = 0

    def __repr__(self) -> str:
        return f"<{type(self).__name__} rank={self.rank} size={self.size}>"

    def _exchange(self, tag: Tag, outgoing: dict[int, bytes], sources: Sequence[int]) -> dict[int, bytes]:
        raise NotImplementedError

    def _collective(self, tag: Tag, outgoing: dict[int, bytes], sources: Sequence[int]) -> dict[int, bytes]:
        self.collectives += 1
        self.bytes_sent += sum(len(p) for p in outgoing.values())
        incoming = self._exchange(tag, outgoing, sources)
        self.bytes_received += sum(len(p) for p in incoming.values())
        return incoming

    def _check_root(self, root: int) -> None:
        if not 0 <= root < self.size:
            raise ContractError(f"root {root} outside [0, {self.size})")

    def barrier(self) -> None:
        everyone = range(self.size)
        self._collective(Tag.BARRIER, {p: b"" for p in everyone}, everyone)

    def all_to_all(self, buckets: Sequence[bytes]) -> list[bytes]:
        """Send ``buckets[j]`` to rank j; element i of the result came from rank i."""
        if len(buckets) != self.size:
            raise ContractError(f"all_to_all needs {self.size} buckets, got {len(buckets)}")
        everyone = range(self.size)
        incoming = self._collective(Tag.ALL_TO_ALL, {p: bytes(buckets[p]) for p in everyone}, everyone)
        return [incoming[p] for p in everyone]

    def gather(self, root: int, payload: bytes) -> list[bytes]:
        self._check_root(root)
        sources = range(self.size) if self.rank == root else ()
        incoming = self._collective(Tag.GATHER, {root: bytes(payload)}, sources)
        return [incoming[p] for p in sources]

    def broadcast(self, root: int, payload: bytes = b"") -> bytes:
        self._check_root(root)
        if self.rank == root:
            payload = bytes(payload)
            self._collective(Tag.BROADCAST, {p: payload for p in range(self.size)}, (root,))
            return payload
        return self._collective(Tag.BROADCAST, {}, (root,))[root]

    def allgather(self, payload: bytes) -> list[bytes]:
        """Every worker receives every worker's payload, in rank order."""
        return self.all_to_all([payload] * self.size)

    def allgather_obj(self, obj) -> list:
        blobs = self.allgather(pickle.dumps(obj, protocol=pickle.HIGHEST_PROTOCOL))
        return [pickle.loads(b) for b in blobs]

    def broadcast_obj(self, root: int, obj=None):
        blob = pickle.dumps(obj, protocol=pickle.HIGHEST_PROTOCOL) if self.rank == root else b""
        return pickle.loads(self.broadcast(root, blob))

    def abort(self) -> None:
        """Break the cluster so blocked peers fail fast instead of timing out."""

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc) -> None:
        self.close()
