"""WordCount: count ASCII-alphanumeric tokens, case-folded."""

from __future__ import annotations

import io
import os
import re
from typing import BinaryIO, Iterable

from fmr.core import INT64, TEXT
from fmr.dist import DistHashMap, DistVector, block_bounds
from fmr.engine import DEFAULT_CACHE_CAPACITY, JobMode, map_reduce
from fmr.transport import ClusterHandle

_TOKEN = re.compile(r"[A-Za-z0-9]+")


def tokenize(text: str) -> list[str]:
    return [t.lower() for t in _TOKEN.findall(text)]


def _wordcount_mapper(line, emit) -> None:
    if isinstance(line, (bytes, bytearray)):
        try:
            line = bytes(line).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ValueError(f"line is not valid UTF-8 ({exc.reason} at byte {exc.start})") from None
    for token in _TOKEN.findall(line):
        emit(token.lower(), 1)


def _add(a: int, b: int) -> int:
    return a + b


def wordcount(lines: DistVector, mode: JobMode | str = JobMode.EAGER, threads: int = 1,
              cache_capacity: int = DEFAULT_CACHE_CAPACITY) -> DistHashMap:
    """Collective word count over a DistVector of text lines (``str`` or UTF-8 ``bytes``).

    An undecodable line aborts the job with a :class:`~fmr.engine.MapperError`
    whose ``index`` is the line's serial key.
    """
    return map_reduce(lines, _wordcount_mapper, _add, mode, threads,
                      key_codec=TEXT, value_codec=INT64, cache_capacity=cache_capacity)


def _range_lines(f: BinaryIO, start: int, stop: int) -> list[bytes]:
    # a line belongs to the range holding its first byte
    if start >= stop:
        return []
    if start > 0:
        f.seek(start - 1)
        if f.read(1) != b"\n":
            f.readline()
    else:
        f.seek(0)
    pos = f.tell()
    out = []
    while pos < stop:
        line = f.readline()
        if not line:
            break
        pos += len(line)
        out.append(line[:-1] if line.endswith(b"\n") else line)
    return out


def lines_for_rank(data: bytes, rank: int, size: int) -> list[bytes]:
    """Lines of an in-memory document whose first byte falls in this rank's byte range."""
    start, stop = block_bounds(len(data), size, rank)
    return _range_lines(io.BytesIO(data), start, stop)


def read_lines_for_rank(paths: Iterable[str | os.PathLike], rank: int, size: int) -> list[bytes]:
    out: list[bytes] = []
    for path in paths:
        start, stop = block_bounds(os.path.getsize(path), size, rank)
        with open(path, "rb") as f:
            out.extend(_range_lines(f, start, stop))
    return out


def load_lines(handle: ClusterHandle, paths: Iterable[str | os.PathLike] = (), data: bytes | None = None) -> DistVector:
    """Parallel read: every worker reads only its own byte range."""
    if data is not None:
        local = lines_for_rank(data, handle.rank, handle.size)
    else:
        local = read_lines_for_rank(paths, handle.rank, handle.size)
    return DistVector.from_local(handle, local)
