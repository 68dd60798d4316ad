"""Iterative k-means (Lloyd's algorithm) as repeated MapReduce rounds.

Each round the mapper sends every point to its nearest centroid as a
partial sum, the partial sums are combined per centroid and the driver
(rank 0) turns them into new centroids and broadcasts them.

Partial sums are kept exactly: every double is a dyadic rational, so a
coordinate is stored as an integer multiple of 2**-1074 and the new centroid
is the correctly rounded quotient.  The combine is therefore exactly
associative and the centroid trajectory is bit-identical for any cluster
shape or reduction mode.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

from fmr.core import INT64, Codec, ConfigError, FmrError, MalformedFrameError
from fmr.dist import DistVector
from fmr.engine import DEFAULT_CACHE_CAPACITY, JobMode, PhaseStats, map_reduce

Point = tuple[float, ...]

_FRAC_BITS = 1074
_DEN = 1 << _FRAC_BITS


class InputError(FmrError, ValueError):
    """Malformed or non-finite input data."""


def exact_coords(point: Sequence[float]) -> tuple[int, ...]:
    """Coordinates as exact integer multiples of 2**-1074."""
    out = []
    for x in point:
        num, den = float(x).as_integer_ratio()
        out.append(num << (_FRAC_BITS - den.bit_length() + 1))
    return tuple(out)


@dataclass(frozen=True)
class CentroidAccumulator:
    sums: tuple[int, ...]
    count: int

    @classmethod
    def of(cls, point: Sequence[float]) -> CentroidAccumulator:
        return cls(exact_coords(point), 1)

    def __add__(self, other: CentroidAccumulator) -> CentroidAccumulator:
        return CentroidAccumulator(tuple(a + b for a, b in zip(self.sums, other.sums)),
                                   self.count + other.count)

    def mean(self) -> Point:
        if self.count == 0:
            raise ZeroDivisionError("mean of an empty accumulator")
        den = self.count * _DEN
        return tuple(s / den for s in self.sums)


class AccumulatorCodec(Codec):
    """``[u32 dim][i64 count]`` then per coordinate ``[u32 nbytes][signed LE int]``."""

    name = "centroid-acc"

    def encode(self, acc: CentroidAccumulator) -> bytes:
        parts = [struct.pack("<Iq", len(acc.sums), acc.count)]
        for s in acc.sums:
            raw = s.to_bytes((s.bit_length() + 8) // 8, "little", signed=True)
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
        return b"".join(parts)

    def decode(self, data: bytes) -> CentroidAccumulator:
        try:
            dim, count = struct.unpack_from("<Iq", data, 0)
            pos = 12
            sums = []
            for _ in range(dim):
                (n,) = struct.unpack_from("<I", data, pos)
                pos += 4
                if pos + n > len(data):
                    raise MalformedFrameError("truncated accumulator coordinate")
                sums.append(int.from_bytes(data[pos:pos + n], "little", signed=True))
                pos += n
        except struct.error as exc:
            raise MalformedFrameError(f"truncated accumulator: {exc}") from None
        return CentroidAccumulator(tuple(sums), count)


ACCUMULATOR = AccumulatorCodec()


@dataclass
class KMeansState:
    centroids: list[Point]
    iteration: int = 0
    shift: float = math.inf
    converged: bool = False
    # centroids before the first round, then after every round
    history: list[list[Point]] = field(default_factory=list)
    stats: PhaseStats = field(default_factory=PhaseStats)


def nearest(point: Sequence[float], centroids: Sequence[Sequence[float]]) -> int:
    """Index of the closest centroid (squared Euclidean); ties go to the lowest index."""
    best, best_d = 0, math.inf
    for j, c in enumerate(centroids):
        d = 0.0
        for a, b in zip(point, c):
            d += (a - b) * (a - b)
        if d < best_d:
            best, best_d = j, d
    return best


def _add(a: CentroidAccumulator, b: CentroidAccumulator) -> CentroidAccumulator:
    return a + b


def _validate(points: DistVector) -> int:
    dim = None
    problems = []
    for i, p in enumerate(points.local):
        if dim is None:
            dim = len(p)
        if len(p) != dim or dim < 1:
            problems.append(f"point {points.offset + i} has dimension {len(p)}, expected {dim}")
        elif not all(math.isfinite(x) for x in p):
            problems.append(f"point {points.offset + i} has a non-finite coordinate")
        if problems:
            break
    reports = points.handle.allgather_obj((dim, problems[:1]))
    for _, msgs in reports:
        if msgs:
            raise InputError(msgs[0])
    dims = {d for d, _ in reports if d is not None}
    if len(dims) > 1:
        raise InputError(f"points disagree on dimension: {sorted(dims)}")
    return dims.pop() if dims else 0


def kmeans(points: DistVector, k: int, init: str | Sequence[Sequence[float]] = "first",
           max_iters: int = 100, tol: float = 1e-6, threads: int = 1,
           mode: JobMode | str = JobMode.EAGER, cache_capacity: int = DEFAULT_CACHE_CAPACITY,
           root: int = 0) -> KMeansState:
    """Collective Lloyd iterations; every worker returns the same final state.

    ``init`` is ``"first"`` (the first ``k`` points by serial key) or an
    explicit list of ``k`` centroids.  Stops once the largest centroid
    displacement is ``<= tol`` or after ``max_iters`` rounds.  An empty
    cluster keeps its previous centroid.
    """
    handle = points.handle
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if tol < 0:
        raise ConfigError(f"tol must be >= 0, got {tol}")
    if points.global_len < k:
        raise ConfigError(f"k={k} exceeds the number of points ({points.global_len})")
    dim = _validate(points)

    if isinstance(init, str):
        if init != "first":
            raise ConfigError(f"unknown init {init!r}")
        centroids = [tuple(map(float, p)) for p in points.head(k)]
    else:
        centroids = [tuple(map(float, c)) for c in init]
        if len(centroids) != k or any(len(c) != dim for c in centroids):
            raise ConfigError(f"explicit init needs {k} centroids of dimension {dim}")
        if not all(math.isfinite(x) for c in centroids for x in c):
            raise InputError("explicit init has a non-finite coordinate")

    prepared = DistVector(handle, [(tuple(p), CentroidAccumulator.of(p)) for p in points.local],
                          points.global_len, points.offset)
    state = KMeansState(centroids=centroids)
    centroids = handle.broadcast_obj(root, centroids)
    state.history.append(centroids)

    while state.iteration < max_iters:
        current = centroids

        def mapper(item, emit, current=current):
            point, acc = item
            emit(nearest(point, current), acc)

        sums = map_reduce(prepared, mapper, _add, mode, threads, key_codec=INT64,
                          value_codec=ACCUMULATOR, cache_capacity=cache_capacity)
        state.stats.add(sums.stats)
        gathered = sums.gather(root)
        update = None
        if handle.rank == root:
            new = [gathered[j].mean() if j in gathered and gathered[j].count else current[j]
                   for j in range(k)]
            shift = max(math.dist(a, b) for a, b in zip(current, new))
            update = (new, shift)
        centroids, shift = handle.broadcast_obj(root, update)
        state.iteration += 1
        state.shift = shift
        state.centroids = centroids
        state.history.append(centroids)
        if shift <= tol:
            state.converged = True
            break
    return state


def wcss_audit(points: DistVector, centroids: Sequence[Sequence[float]]) -> float:
    """Collective within-cluster sum of squares under nearest-centroid assignment."""
    local = [sum((a - b) ** 2 for a, b in zip(p, centroids[nearest(p, centroids)]))
             for p in points.local]
    parts = points.handle.allgather_obj(local)
    return math.fsum(x for part in parts for x in part)


def parse_points(lines: Sequence[bytes | str]) -> list[Point]:
    """One point per line, coordinates separated by spaces; blank lines skipped."""
    out = []
    for n, line in enumerate(lines):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        fields = line.split()
        if not fields:
            continue
        try:
            out.append(tuple(float(f) for f in fields))
        except ValueError as exc:
            raise InputError(f"line {n}: {exc}") from None
    return out


def format_points(points: Sequence[Sequence[float]]) -> str:
    return "".join(" ".join(repr(float(x)) for x in p) + "\n" for p in points)
