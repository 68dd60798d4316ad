"""Bulk-synchronous collectives over threads (in-process) or sockets (TCP)."""

from __future__ import annotations

import socket
import threading
from dataclasses import replace
from typing import Any, Callable

from fmr.transport.base import (
    ClusterConfig,
    ClusterHandle,
    ContractError,
    StartupError,
    Tag,
    TransportError,
    read_cluster_file,
    write_cluster_file,
)
from fmr.transport.inproc import InProcessHandle, init_in_process
from fmr.transport.tcp import TcpHandle, init_tcp

__all__ = [
    "ClusterConfig", "ClusterHandle", "ContractError", "InProcessHandle", "StartupError",
    "Tag", "TcpHandle", "TransportError", "cluster_init", "free_endpoints",
    "read_cluster_file", "run_spmd", "write_cluster_file",
]


def cluster_init(config: ClusterConfig) -> list[ClusterHandle]:
    """Handles owned by this process: all of them in-process, one for TCP."""
    config.validate()
    if config.backend == "tcp":
        return [init_tcp(config)]
    return init_in_process(config.num_workers, config.collective_timeout)


def free_endpoints(n: int, host: str = "127.0.0.1") -> list[str]:
    socks = []
    try:
        for _ in range(n):
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.bind((host, 0))
            socks.append(s)
        return [f"{host}:{s.getsockname()[1]}" for s in socks]
    finally:
        for s in socks:
            s.close()


def run_spmd(fn: Callable[[ClusterHandle], Any], num_workers: int, backend: str = "in_process",
             **config_kw) -> list[Any]:
    """Run ``fn(handle)`` once per worker, each on its own thread.

    With ``backend="tcp"`` every worker gets a real loopback socket mesh.
    Returns the per-rank results.  If any worker raises, the cluster is
    aborted so its peers stop waiting, and the first non-transport error is
    re-raised (a transport error only if nothing else went wrong).
    """
    config = ClusterConfig(num_workers, backend, **config_kw)
    if config.backend == "tcp" and not config.endpoints:
        config = replace(config, endpoints=free_endpoints(num_workers))
    if config.backend != "tcp":
        config.validate()

    results: list[Any] = [None] * num_workers
    errors: list[BaseException | None] = [None] * num_workers
    handles: list[ClusterHandle | None] = [None] * num_workers
    lock = threading.Lock()

    def abort_all() -> None:
        with lock:
            for h in handles:
                if h is not None:
                    h.abort()

    def body(rank: int) -> None:
        try:
            if config.backend == "tcp":
                handle = init_tcp(replace(config, rank=rank))
            else:
                handle = shared[rank]
            with lock:
                handles[rank] = handle
            results[rank] = fn(handle)
        except BaseException as exc:  # noqa: BLE001 - reported to caller below
            errors[rank] = exc
            abort_all()

    shared = init_in_process(num_workers, config.collective_timeout) if config.backend != "tcp" else None
    threads = [threading.Thread(target=body, args=(r,), name=f"fmr-worker-{r}", daemon=True)
               for r in range(num_workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for h in handles:
        if h is not None:
            h.close()

    primary = [e for e in errors if e is not None and not isinstance(e, TransportError)]
    if primary:
        raise primary[0]
    secondary = [e for e in errors if e is not None]
    if secondary:
        raise secondary[0]
    return results
