"""Monte-Carlo estimate of pi over 4096 fixed splitmix64 streams.

Samples are spread over the streams independently of the cluster shape and
the streams are block-distributed over workers, so the estimate depends only
on ``(total_samples, seed)``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from fmr.core import INT64, ConfigError
from fmr.dist import DistHashMap, DistVector
from fmr.engine import DEFAULT_CACHE_CAPACITY, JobMode, map_reduce
from fmr.transport import ClusterHandle

NUM_STREAMS = 4096
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1
# bounds the temporary arrays of one vectorised draw
CHUNK = 1 << 18

# draw(stream_seed, first_draw, count) -> (x, y) arrays in [0, 1)
DrawFn = Callable[[int, int, int], tuple[np.ndarray, np.ndarray]]


class SplitMix64:
    """Scalar splitmix64, one output per :meth:`next` call."""

    def __init__(self, seed: int) -> None:
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)


def splitmix64_outputs(seed: int, start: int, count: int) -> np.ndarray:
    """Outputs ``start .. start+count-1`` of the splitmix64 sequence for ``seed``.

    splitmix64 is counter based (output n mixes ``seed + (n+1) * gamma``), so
    any window can be computed without replaying the prefix.
    """
    n = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    z = n * np.uint64(GOLDEN_GAMMA) + np.uint64(seed & _MASK64)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def to_unit_float(bits: np.ndarray) -> np.ndarray:
    """Top 53 bits as a double in [0, 1)."""
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def splitmix_draws(stream_seed: int, first: int, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw j uses outputs 2j (x) and 2j+1 (y) of the stream."""
    u = to_unit_float(splitmix64_outputs(stream_seed, 2 * first, 2 * count))
    return u[0::2], u[1::2]


def stream_seed(seed: int, stream: int) -> int:
    return ((seed & _MASK64) ^ ((stream * GOLDEN_GAMMA) & _MASK64)) & _MASK64


def stream_samples(total_samples: int, stream: int) -> int:
    base, extra = divmod(total_samples, NUM_STREAMS)
    return base + (1 if stream < extra else 0)


def _add(a: int, b: int) -> int:
    return a + b


def make_mapper(total_samples: int, seed: int, draw: DrawFn = splitmix_draws, per_sample: bool = False):
    """Mapper over stream ids.

    With ``per_sample`` every draw emits ``(0, 1)`` or ``(0, 0)``; otherwise
    each vectorised chunk emits its inside count under key 0, which is the
    same contribution pre-summed.
    """

    def mapper(stream: int, emit) -> None:
        n = stream_samples(total_samples, stream)
        s = stream_seed(seed, stream)
        for first in range(0, n, CHUNK):
            x, y = draw(s, first, min(CHUNK, n - first))
            inside = (x * x + y * y) <= 1.0
            if per_sample:
                for hit in inside.tolist():
                    emit(0, 1 if hit else 0)
            else:
                emit(0, int(np.count_nonzero(inside)))

    return mapper


def pi_counts(handle: ClusterHandle, total_samples: int, seed: int, mode: JobMode | str = JobMode.EAGER,
              threads: int = 1, draw: DrawFn = splitmix_draws, per_sample: bool = False,
              cache_capacity: int = DEFAULT_CACHE_CAPACITY) -> DistHashMap:
    """Collective: ``{0: points inside the quarter circle}``."""
    if total_samples < 1:
        raise ConfigError(f"total_samples must be positive, got {total_samples}")
    streams = DistVector.from_range(handle, NUM_STREAMS)
    return map_reduce(streams, make_mapper(total_samples, seed, draw, per_sample), _add, mode, threads,
                      key_codec=INT64, value_codec=INT64, cache_capacity=cache_capacity)


def pi_estimate(handle: ClusterHandle, total_samples: int, seed: int, mode: JobMode | str = JobMode.EAGER,
                threads: int = 1, draw: DrawFn = splitmix_draws, per_sample: bool = False) -> float:
    """Collective: ``4 * inside / total``, identical on every worker."""
    counts = pi_counts(handle, total_samples, seed, mode, threads, draw, per_sample)
    inside = counts.get(0) or 0
    return 4.0 * inside / total_samples
