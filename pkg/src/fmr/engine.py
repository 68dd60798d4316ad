"""Eager and delayed MapReduce pipelines.

Eager reduction folds values with a binary combine at three levels before
the owner ever sees them: a direct-mapped cache per map thread, a
worker-level aggregation map, and the owner's shard.  Delayed reduction
ships every raw pair, merge-sorts each owner's arrivals by key and hands
the reducer the whole ordered value list of a key.

Within a group, values are ordered by (source rank, map thread, emission
order).  Map threads take contiguous sub-blocks of the worker's block, the
shuffle concatenates buckets in rank order and the merge sort is stable, so
that order falls out without extra bookkeeping.
"""

from __future__ import annotations

import bisect
import enum
import itertools
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from typing import Any, Callable, Sequence

from fmr.core import INT64, TEXT, Codec, FmrError, encode_kv, iter_kv, key_hash
from fmr.dist import DistGroupedMap, DistHashMap, DistVector, block_bounds

DEFAULT_CACHE_CAPACITY = 1 << 16

Emit = Callable[[Any, Any], None]
MapperFn = Callable[[Any, Emit], None]
CombineFn = Callable[[Any, Any], Any]
ReduceFn = Callable[[Any, list], Any]


class JobMode(str, enum.Enum):
    EAGER = "eager"
    DELAYED = "delayed"


class MapperError(FmrError):
    def __init__(self, index: int, cause: BaseException) -> None:
        super().__init__(f"mapper failed on source element {index}: {cause!r}")
        self.index = index


class ReduceError(FmrError):
    def __init__(self, key: Any, cause: BaseException) -> None:
        super().__init__(f"reducer failed on key {key!r}: {cause!r}")
        self.key = key


class CombineError(FmrError, TypeError):
    """The combine function is not associative and commutative on sampled values."""


@dataclass
class PhaseStats:
    map_ms: float = 0.0
    shuffle_ms: float = 0.0
    sort_ms: float = 0.0
    reduce_ms: float = 0.0
    pairs_emitted: int = 0
    pairs_shuffled: int = 0
    bytes_shuffled: int = 0

    def add(self, other: PhaseStats | None) -> PhaseStats:
        if other is not None:
            for f in fields(self):
                setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    @property
    def total_ms(self) -> float:
        return self.map_ms + self.shuffle_ms + self.sort_ms + self.reduce_ms


def _ms_since(t0: float) -> float:
    return (time.perf_counter() - t0) * 1e3


class ThreadLocalCache:
    """Direct-mapped combining cache owned by one map thread.

    A key lives in slot ``fnv1a(key bytes) % capacity``.  A hit combines in
    place; a miss on an occupied slot evicts the occupant (flush on
    collision).
    """

    __slots__ = ("capacity", "combine", "_encode", "_slots", "_used")

    def __init__(self, capacity: int, combine: CombineFn, key_encode: Callable[[Any], bytes]) -> None:
        if capacity < 1:
            raise ValueError(f"cache capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.combine = combine
        self._encode = key_encode
        self._slots: list[list | None] = [None] * capacity
        self._used: list[int] = []

    def slot_of(self, key: Any) -> int:
        return key_hash(self._encode(key)) % self.capacity

    def absorb(self, key: Any, value: Any) -> tuple[Any, Any] | None:
        idx = key_hash(self._encode(key)) % self.capacity
        slot = self._slots[idx]
        if slot is None:
            self._slots[idx] = [key, value]
            self._used.append(idx)
            return None
        if slot[0] == key:
            slot[1] = self.combine(slot[1], value)
            return None
        evicted = (slot[0], slot[1])
        slot[0], slot[1] = key, value
        return evicted

    def drain(self) -> list[tuple[Any, Any]]:
        """Empty the cache, returning occupied slots in first-use order."""
        out = []
        for idx in self._used:
            slot = self._slots[idx]
            out.append((slot[0], slot[1]))
            self._slots[idx] = None
        self._used = []
        return out

    def __len__(self) -> int:
        return len(self._used)


_RUN = 32


def _merge(a: list, b: list) -> list:
    if not a or not b or not b[0] < a[-1]:
        return a + b
    out: list = []
    push = out.append
    i = j = 0
    la, lb = len(a), len(b)
    while i < la and j < lb:
        # ties take from the left run: this is what makes the sort stable
        if b[j] < a[i]:
            push(b[j])
            j += 1
        else:
            push(a[i])
            i += 1
    out.extend(a[i:])
    out.extend(b[j:])
    return out


def merge_sort(items: Sequence, key: Callable[[Any], Any] | None = None) -> list:
    """Stable bottom-up merge sort.

    Base runs of 32 elements are built by binary insertion, then adjacent
    runs are merged pairwise until one remains.  Elements are compared via
    ``(key, input position)`` so equal keys keep their input order.
    """
    items = list(items)
    n = len(items)
    if n < 2:
        return items
    keys = items if key is None else [key(x) for x in items]
    decorated = list(zip(keys, range(n)))
    runs = []
    for lo in range(0, n, _RUN):
        run: list = []
        for entry in decorated[lo:lo + _RUN]:
            bisect.insort_right(run, entry)
        runs.append(run)
    while len(runs) > 1:
        merged = [_merge(runs[j], runs[j + 1]) for j in range(0, len(runs) - 1, 2)]
        if len(runs) % 2:
            merged.append(runs[-1])
        runs = merged
    return [items[i] for _, i in runs[0]]


def check_combine(combine: CombineFn, samples: Sequence, trials: int = 64, seed: int = 0) -> None:
    """Spot-check associativity and commutativity on sampled values.

    Raises :class:`CombineError` with the first counterexample found.
    """
    samples = list(samples)
    if not samples:
        return
    rng = random.Random(seed)
    for _ in range(trials):
        a, b, c = (rng.choice(samples) for _ in range(3))
        if combine(a, b) != combine(b, a):
            raise CombineError(f"combine is not commutative: f({a!r}, {b!r}) != f({b!r}, {a!r})")
        if combine(combine(a, b), c) != combine(a, combine(b, c)):
            raise CombineError(f"combine is not associative on ({a!r}, {b!r}, {c!r})")


def _run_mappers(source: DistVector, mapper: MapperFn, threads: int,
                 thread_body: Callable[[MapperFn, list, int], Any]) -> list:
    """Run ``thread_body`` over contiguous sub-blocks, one per map thread."""
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    local = source.local
    blocks = []
    for t in range(threads):
        start, stop = block_bounds(len(local), threads, t)
        blocks.append((local[start:stop], source.offset + start))
    if threads == 1:
        return [thread_body(mapper, *blocks[0])]
    with ThreadPoolExecutor(max_workers=threads, thread_name_prefix="fmr-map") as pool:
        futures = [pool.submit(thread_body, mapper, block, first) for block, first in blocks]
        return [f.result() for f in futures]


def _apply(mapper: MapperFn, block: list, first: int, emit: Emit) -> None:
    for i, element in enumerate(block):
        try:
            mapper(element, emit)
        except FmrError:
            raise
        except Exception as exc:
            raise MapperError(first + i, exc) from exc


def map_reduce_eager(source: DistVector, mapper: MapperFn, combine: CombineFn, threads: int = 1, *,
                     key_codec: Codec = TEXT, value_codec: Codec = INT64,
                     cache_capacity: int = DEFAULT_CACHE_CAPACITY,
                     check_samples: Sequence | None = None) -> DistHashMap:
    """Map and reduce with a binary associative-commutative ``combine``.

    Pass ``check_samples`` to reject a combine that fails the
    associativity/commutativity spot check before any work is done.
    """
    if check_samples is not None:
        check_combine(combine, check_samples)
    handle = source.handle
    size = handle.size
    kenc = key_codec.encode
    stats = PhaseStats()
    t0 = time.perf_counter()

    def body(fn: MapperFn, block: list, first: int) -> tuple[list, int]:
        cache = ThreadLocalCache(cache_capacity, combine, kenc)
        out: list = []
        count = 0

        def emit(key, value):
            nonlocal count
            count += 1
            evicted = cache.absorb(key, value)
            if evicted is not None:
                out.append(evicted)

        _apply(fn, block, first, emit)
        out.extend(cache.drain())
        return out, count

    per_thread = _run_mappers(source, mapper, threads, body)

    # worker-level aggregation, one map per destination
    agg: list[dict] = [{} for _ in range(size)]
    for pairs, count in per_thread:
        stats.pairs_emitted += count
        for key, value in pairs:
            d = agg[key_hash(kenc(key)) % size]
            if key in d:
                d[key] = combine(d[key], value)
            else:
                d[key] = value
    venc = value_codec.encode
    buckets = [b"".join(encode_kv(kenc(k), venc(v)) for k, v in d.items()) for d in agg]
    stats.pairs_shuffled = sum(len(d) for d in agg)
    stats.bytes_shuffled = sum(len(b) for b in buckets)
    handle.barrier()
    stats.map_ms = _ms_since(t0)

    t0 = time.perf_counter()
    received = handle.all_to_all(buckets)
    stats.shuffle_ms = _ms_since(t0)

    t0 = time.perf_counter()
    result = DistHashMap(handle, combine, key_codec, value_codec)
    result._merge_received(received)
    handle.barrier()
    stats.reduce_ms = _ms_since(t0)
    result.stats = stats
    return result


def map_group(source: DistVector, mapper: MapperFn, threads: int = 1, *,
              key_codec: Codec = TEXT, value_codec: Codec = INT64) -> DistGroupedMap:
    """Shuffle raw pairs to their owners and group them into per-key value lists."""
    handle = source.handle
    size = handle.size
    kenc, venc = key_codec.encode, value_codec.encode
    stats = PhaseStats()
    t0 = time.perf_counter()

    def body(fn: MapperFn, block: list, first: int) -> list:
        out: list = []
        _apply(fn, block, first, lambda k, v: out.append((k, v)))
        return out

    per_thread = _run_mappers(source, mapper, threads, body)
    frames: list[list[bytes]] = [[] for _ in range(size)]
    for pairs in per_thread:
        stats.pairs_emitted += len(pairs)
        for key, value in pairs:
            kb = kenc(key)
            frames[key_hash(kb) % size].append(encode_kv(kb, venc(value)))
    buckets = [b"".join(f) for f in frames]
    stats.pairs_shuffled = stats.pairs_emitted
    stats.bytes_shuffled = sum(len(b) for b in buckets)
    handle.barrier()
    stats.map_ms = _ms_since(t0)

    t0 = time.perf_counter()
    received = handle.all_to_all(buckets)
    stats.shuffle_ms = _ms_since(t0)

    t0 = time.perf_counter()
    kdec, vdec = key_codec.decode, value_codec.decode
    arrivals = [(kdec(kb), vdec(vb)) for blob in received for kb, vb in iter_kv(blob)]
    ordered = merge_sort(arrivals, key=lambda kv: kv[0])
    groups = [(key, [v for _, v in run])
              for key, run in itertools.groupby(ordered, key=lambda kv: kv[0])]
    handle.barrier()
    stats.sort_ms = _ms_since(t0)

    grouped = DistGroupedMap(handle, groups, key_codec, value_codec)
    grouped.stats = stats
    return grouped


def reduce_grouped(grouped: DistGroupedMap, reduce: ReduceFn, *,
                   value_codec: Codec | None = None) -> DistHashMap:
    """Apply ``reduce(key, values)`` to every local group; no data moves."""
    t0 = time.perf_counter()
    result = DistHashMap(grouped.handle, None, grouped.key_codec, value_codec or grouped.value_codec)
    shard = result.shard
    for key, values in grouped.groups:
        try:
            shard[key] = reduce(key, values)
        except Exception as exc:
            raise ReduceError(key, exc) from exc
    grouped.handle.barrier()
    stats = PhaseStats(reduce_ms=_ms_since(t0))
    result.stats = stats.add(grouped.stats)
    return result


def map_reduce_delayed(source: DistVector, mapper: MapperFn, reduce: ReduceFn, threads: int = 1, *,
                       key_codec: Codec = TEXT, value_codec: Codec = INT64,
                       result_codec: Codec | None = None) -> DistHashMap:
    grouped = map_group(source, mapper, threads, key_codec=key_codec, value_codec=value_codec)
    return reduce_grouped(grouped, reduce, value_codec=result_codec)


def fold_reducer(combine: CombineFn) -> ReduceFn:
    """Delayed-mode reducer equivalent to folding ``combine`` left to right."""

    def reduce(_key, values):
        acc = values[0]
        for v in values[1:]:
            acc = combine(acc, v)
        return acc

    return reduce


def map_reduce(source: DistVector, mapper: MapperFn, combine: CombineFn, mode: JobMode | str = JobMode.EAGER,
               threads: int = 1, *, key_codec: Codec = TEXT, value_codec: Codec = INT64,
               cache_capacity: int = DEFAULT_CACHE_CAPACITY) -> DistHashMap:
    """Run a fold-style job in either mode; the answers are identical."""
    mode = JobMode(mode)
    if mode is JobMode.EAGER:
        return map_reduce_eager(source, mapper, combine, threads, key_codec=key_codec,
                                value_codec=value_codec, cache_capacity=cache_capacity)
    return map_reduce_delayed(source, mapper, fold_reducer(combine), threads,
                              key_codec=key_codec, value_codec=value_codec)
