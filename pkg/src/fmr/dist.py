"""Distributed containers: DistVector, DistHashMap and DistGroupedMap.

All methods that take no arguments beyond ``self`` and talk to the cluster
are collective: every worker has to call them, in the same order.
"""

from __future__ import annotations

import pickle
import threading
from typing import Any, Callable, Iterable, Iterator, Sequence

from fmr.core import INT64, TEXT, Codec, encode_kv, iter_kv, key_hash
from fmr.transport import ClusterHandle

CombineFn = Callable[[Any, Any], Any]


def block_bounds(length: int, size: int, rank: int) -> tuple[int, int]:
    """Slice ``[start, stop)`` of a sequence of ``length`` held by ``rank``.

    The first ``length % size`` workers hold one extra element, so block
    sizes never differ by more than one.
    """
    base, extra = divmod(length, size)
    start = rank * base + min(rank, extra)
    return start, start + base + (1 if rank < extra else 0)


def owner_block(index: int, length: int, size: int) -> int:
    """Rank holding serial key ``index`` under :func:`block_bounds`."""
    if not 0 <= index < length:
        raise IndexError(f"serial key {index} outside [0, {length})")
    base, extra = divmod(length, size)
    cut = extra * (base + 1)
    if index < cut:
        return index // (base + 1)
    return extra + (index - cut) // base


def _dumps(obj: Any) -> bytes:
    return pickle.dumps(obj, protocol=pickle.HIGHEST_PROTOCOL)


class DistVector:
    """A sequence split into contiguous per-worker blocks in rank order.

    Element ``i`` of the global sequence has serial key ``i``; the local block
    covers keys ``offset .. offset + len(local) - 1``.
    """

    def __init__(self, handle: ClusterHandle, local: list, global_len: int, offset: int) -> None:
        self.handle = handle
        self.local = local
        self.global_len = global_len
        self.offset = offset

    def __repr__(self) -> str:
        return (f"DistVector(rank={self.handle.rank}, local={len(self.local)}, "
                f"offset={self.offset}, global_len={self.global_len})")

    def __len__(self) -> int:
        return self.global_len

    @classmethod
    def scatter(cls, handle: ClusterHandle, data: Sequence | None = None, root: int = 0) -> DistVector:
        """Split ``data`` (only read at ``root``) into balanced blocks."""
        size = handle.size
        if handle.rank == root:
            items = list(data or ())
            buckets = []
            for w in range(size):
                start, stop = block_bounds(len(items), size, w)
                buckets.append(_dumps((len(items), start, items[start:stop])))
        else:
            buckets = [b""] * size
        received = handle.all_to_all(buckets)
        global_len, offset, local = pickle.loads(received[root])
        return cls(handle, local, global_len, offset)

    @classmethod
    def from_local(cls, handle: ClusterHandle, local: Iterable) -> DistVector:
        """Adopt each worker's block as is; serial keys follow rank order."""
        local = list(local)
        lengths = handle.allgather_obj(len(local))
        return cls(handle, local, sum(lengths), sum(lengths[:handle.rank]))

    @classmethod
    def from_range(cls, handle: ClusterHandle, n: int) -> DistVector:
        """The integers ``0..n-1``, each worker materialising only its block."""
        start, stop = block_bounds(n, handle.size, handle.rank)
        return cls(handle, list(range(start, stop)), n, start)

    def gather(self, root: int = 0) -> list:
        """Rank-order concatenation at ``root``; an empty list elsewhere."""
        blobs = self.handle.gather(root, _dumps(self.local))
        out: list = []
        for blob in blobs:
            out.extend(pickle.loads(blob))
        return out

    def is_balanced(self) -> bool:
        start, stop = block_bounds(self.global_len, self.handle.size, self.handle.rank)
        return (self.offset, self.offset + len(self.local)) == (start, stop)

    def balance(self) -> DistVector:
        """Redistribute into equal-size blocks, preserving element order."""
        size = self.handle.size
        buckets = []
        lo, hi = self.offset, self.offset + len(self.local)
        for w in range(size):
            start, stop = block_bounds(self.global_len, size, w)
            a, b = max(lo, start), min(hi, stop)
            buckets.append(_dumps(self.local[a - lo:b - lo] if a < b else []))
        local: list = []
        for blob in self.handle.all_to_all(buckets):
            local.extend(pickle.loads(blob))
        start, _ = block_bounds(self.global_len, size, self.handle.rank)
        return DistVector(self.handle, local, self.global_len, start)

    def head(self, k: int) -> list:
        """The first ``k`` elements, returned on every worker."""
        take = max(0, min(len(self.local), k - self.offset))
        parts = self.handle.allgather_obj(self.local[:take])
        return [x for part in parts for x in part][:k]


class DistHashMap:
    """Key/value store sharded by ``partition(key, size)``.

    Emissions are buffered per calling thread and only become visible after
    the collective :meth:`sync`.  On a key collision the ``combine`` function
    merges old and new values; without one the newer value replaces the older.
    """

    def __init__(self, handle: ClusterHandle, combine: CombineFn | None = None,
                 key_codec: Codec = TEXT, value_codec: Codec = INT64) -> None:
        self.handle = handle
        self.combine = combine
        self.key_codec = key_codec
        self.value_codec = value_codec
        self.shard: dict = {}
        self._tls = threading.local()
        self._buffers: list[list] = []
        self._buffers_lock = threading.Lock()
        self.last_sync_sent = 0
        self.last_sync_merged = 0
        self.stats = None

    def __repr__(self) -> str:
        return f"DistHashMap(rank={self.handle.rank}, local={len(self.shard)})"

    def owner(self, key: Any) -> int:
        return key_hash(self.key_codec.encode(key)) % self.handle.size

    def merge_local(self, key: Any, value: Any) -> None:
        shard = self.shard
        if self.combine is not None and key in shard:
            shard[key] = self.combine(shard[key], value)
        else:
            shard[key] = value

    def emit(self, key: Any, value: Any) -> None:
        """Buffer a contribution; safe to call from several threads at once."""
        buf = getattr(self._tls, "buf", None)
        if buf is None:
            buf = self._tls.buf = []
            with self._buffers_lock:
                self._buffers.append(buf)
        buf.append((key, value))

    def _route(self, pairs: Iterable[tuple[Any, Any]]) -> list[bytes]:
        size = self.handle.size
        kenc, venc = self.key_codec.encode, self.value_codec.encode
        frames: list[list[bytes]] = [[] for _ in range(size)]
        for key, value in pairs:
            kb = kenc(key)
            frames[key_hash(kb) % size].append(encode_kv(kb, venc(value)))
        return [b"".join(f) for f in frames]

    def _merge_received(self, blobs: Sequence[bytes]) -> int:
        kdec, vdec = self.key_codec.decode, self.value_codec.decode
        merged = 0
        for blob in blobs:
            for kb, vb in iter_kv(blob):
                self.merge_local(kdec(kb), vdec(vb))
                merged += 1
        return merged

    def sync(self) -> None:
        """Route every buffered emission to its owner and merge it there."""
        with self._buffers_lock:
            buffers, self._buffers = self._buffers, []
            self._tls = threading.local()
        pending = [pair for buf in buffers for pair in buf]
        self.last_sync_sent = len(pending)
        received = self.handle.all_to_all(self._route(pending))
        self.last_sync_merged = self._merge_received(received)

    def get(self, key: Any) -> Any | None:
        """Collective lookup; every worker must pass the same key."""
        owner = self.owner(key)
        payload = b""
        if self.handle.rank == owner and key in self.shard:
            payload = b"\x01" + self.value_codec.encode(self.shard[key])
        blob = self.handle.broadcast(owner, payload)
        return self.value_codec.decode(blob[1:]) if blob else None

    def gather(self, root: int = 0) -> dict:
        """Union of all shards at ``root`` (an empty dict elsewhere)."""
        kenc, venc = self.key_codec.encode, self.value_codec.encode
        blob = b"".join(encode_kv(kenc(k), venc(v)) for k, v in self.shard.items())
        out: dict = {}
        kdec, vdec = self.key_codec.decode, self.value_codec.decode
        for part in self.handle.gather(root, blob):
            for kb, vb in iter_kv(part):
                out[kdec(kb)] = vdec(vb)
        return out

    def rebalance(self) -> int:
        """Move entries whose owner is not this worker; returns how many left here."""
        rank = self.handle.rank
        stray = [(k, v) for k, v in self.shard.items() if self.owner(k) != rank]
        for k, _ in stray:
            del self.shard[k]
        self._merge_received(self.handle.all_to_all(self._route(stray)))
        return len(stray)

    def global_size(self) -> int:
        return sum(self.handle.allgather_obj(len(self.shard)))

    def items(self) -> Iterator[tuple[Any, Any]]:
        return iter(self.shard.items())


class DistGroupedMap:
    """Per-worker ``(key, [values...])`` groups, sorted by key, one group per key.

    Produced by :func:`fmr.engine.map_group`; reduce it now or later with
    :meth:`reduce`.
    """

    def __init__(self, handle: ClusterHandle, groups: list[tuple[Any, list]],
                 key_codec: Codec = TEXT, value_codec: Codec = INT64) -> None:
        self.handle = handle
        self.groups = groups
        self.key_codec = key_codec
        self.value_codec = value_codec
        self.stats = None

    def __repr__(self) -> str:
        return f"DistGroupedMap(rank={self.handle.rank}, groups={len(self.groups)})"

    def __iter__(self) -> Iterator[tuple[Any, list]]:
        return iter(self.groups)

    def __len__(self) -> int:
        return len(self.groups)

    def reduce(self, reduce_fn: Callable[[Any, list], Any], value_codec: Codec | None = None) -> DistHashMap:
        from fmr.engine import reduce_grouped
        return reduce_grouped(self, reduce_fn, value_codec=value_codec)

    def gather(self, root: int = 0) -> list[tuple[Any, list]]:
        """All groups at ``root``, ordered by key."""
        parts = self.handle.gather(root, _dumps(self.groups))
        groups = [g for blob in parts for g in pickle.loads(blob)]
        groups.sort(key=lambda g: g[0])
        return groups
