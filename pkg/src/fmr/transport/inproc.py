"""Workers as threads of one process, exchanging through a shared mailbox."""

from __future__ import annotations

import threading
from typing import Sequence

from fmr.transport.base import ClusterHandle, Tag, TransportError


class _Hub:
    def __init__(self, size: int) -> None:
        self.size = size
        self.barrier = threading.Barrier(size)
        # mailbox[src][dst]
        self.mailbox: list[list[bytes | None]] = [[None] * size for _ in range(size)]
        self.calls: list[tuple[int, int] | None] = [None] * size


class InProcessHandle(ClusterHandle):
    def __init__(self, hub: _Hub, rank: int, collective_timeout: float) -> None:
        super().__init__(rank, hub.size, collective_timeout)
        self._hub = hub
        self._seq = 0

    def _wait(self) -> None:
        try:
            self._hub.barrier.wait(self.collective_timeout)
        except threading.BrokenBarrierError:
            raise TransportError(
                f"rank {self.rank}: collective #{self._seq} broken (peer failed or timed out "
                f"after {self.collective_timeout}s)") from None

    def _exchange(self, tag: Tag, outgoing: dict[int, bytes], sources: Sequence[int]) -> dict[int, bytes]:
        hub = self._hub
        self._seq += 1
        row = hub.mailbox[self.rank]
        for dst, payload in outgoing.items():
            row[dst] = payload
        hub.calls[self.rank] = (self._seq, int(tag))
        self._wait()
        if any(c != hub.calls[self.rank] for c in hub.calls):
            mismatch = {r: c for r, c in enumerate(hub.calls)}
            hub.barrier.abort()
            raise TransportError(f"rank {self.rank}: mismatched collective calls {mismatch}")
        incoming = {}
        for src in sources:
            payload = hub.mailbox[src][self.rank]
            if payload is None:
                raise TransportError(f"rank {self.rank}: no payload from rank {src}")
            incoming[src] = payload
        # this rank owns column `rank` of the mailbox
        for src in range(hub.size):
            hub.mailbox[src][self.rank] = None
        self._wait()
        return incoming

    def abort(self) -> None:
        self._hub.barrier.abort()


def init_in_process(num_workers: int, collective_timeout: float) -> list[InProcessHandle]:
    hub = _Hub(num_workers)
    return [InProcessHandle(hub, r, collective_timeout) for r in range(num_workers)]
