"""Key/value contracts, canonical byte encodings and the hash partitioner.

Every key that crosses a worker boundary is reduced to a canonical byte
string first.  The partitioner and the shuffle wire format both work on
those bytes, so two implementations that agree on the encodings agree on
placement and on the bytes on the wire.
"""

from __future__ import annotations

import pickle
import struct
from functools import lru_cache
from typing import Any, Callable, Iterable, Iterator

FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

# u32 length prefix bounds every encoded key and value
MAX_FIELD = 0xFFFFFFFF

_U32 = struct.Struct("<I")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")


class FmrError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(FmrError):
    """Invalid job, cluster or CLI configuration."""


class OversizeError(FmrError):
    """A key or value encoding does not fit the u32 length prefix."""


class MalformedFrameError(FmrError):
    """A byte buffer does not hold a complete encoded pair or frame."""


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET_BASIS
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


# keys repeat heavily in every job; hashing is pure so memoising is safe
_fnv1a64_cached = lru_cache(maxsize=1 << 17)(fnv1a64)


def key_hash(data: bytes) -> int:
    """FNV-1a 64 of ``data``, memoised for hot shuffle paths."""
    return _fnv1a64_cached(data)


class Codec:
    """A deterministic, injective mapping between values and bytes."""

    name = "codec"

    def encode(self, value: Any) -> bytes:
        raise NotImplementedError

    def decode(self, data: bytes) -> Any:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"<Codec {self.name}>"


class TextCodec(Codec):
    name = "text"

    def encode(self, value: str) -> bytes:
        return value.encode("utf-8")

    def decode(self, data: bytes) -> str:
        return bytes(data).decode("utf-8")


class BytesCodec(Codec):
    name = "bytes"

    def encode(self, value: bytes) -> bytes:
        return bytes(value)

    def decode(self, data: bytes) -> bytes:
        return bytes(data)


class Int64Codec(Codec):
    name = "int64"

    def encode(self, value: int) -> bytes:
        return _I64.pack(value)

    def decode(self, data: bytes) -> int:
        return _I64.unpack(data)[0]


class Float64Codec(Codec):
    name = "float64"

    def encode(self, value: float) -> bytes:
        return _F64.pack(value)

    def decode(self, data: bytes) -> float:
        return _F64.unpack(data)[0]


class Float64VecCodec(Codec):
    """u32 element count, then IEEE-754 doubles, little-endian."""

    name = "f64vec"

    def encode(self, value: Iterable[float]) -> bytes:
        items = tuple(value)
        return struct.pack(f"<I{len(items)}d", len(items), *items)

    def decode(self, data: bytes) -> tuple[float, ...]:
        (n,) = _U32.unpack_from(data, 0)
        if len(data) != 4 + 8 * n:
            raise MalformedFrameError(f"f64 vector of {n} elements needs {4 + 8 * n} bytes, got {len(data)}")
        return struct.unpack_from(f"<{n}d", data, 4)


class PickleCodec(Codec):
    """Control-plane payloads only; never used on the shuffle path."""

    name = "pickle"

    def encode(self, value: Any) -> bytes:
        return pickle.dumps(value, protocol=pickle.HIGHEST_PROTOCOL)

    def decode(self, data: bytes) -> Any:
        return pickle.loads(data)


TEXT = TextCodec()
BYTES = BytesCodec()
INT64 = Int64Codec()
FLOAT64 = Float64Codec()
F64VEC = Float64VecCodec()
PICKLE = PickleCodec()


def canonical_bytes(key: Any) -> bytes:
    """Canonical encoding for the built-in key types.

    ``str`` is UTF-8, ``int`` is a little-endian signed 64-bit integer,
    ``bytes`` pass through and tuples/lists of floats use the f64 vector
    layout.  Keys of one job must share a single type.
    """
    if isinstance(key, str):
        return key.encode("utf-8")
    if isinstance(key, (bytes, bytearray, memoryview)):
        return bytes(key)
    if isinstance(key, int):
        return _I64.pack(key)
    if isinstance(key, (tuple, list)):
        return F64VEC.encode(key)
    raise TypeError(f"no canonical encoding for key of type {type(key).__name__}")


def partition(key: Any, num_workers: int, encode: Callable[[Any], bytes] = canonical_bytes) -> int:
    """Owning worker of ``key``: FNV-1a 64 of its canonical bytes mod ``num_workers``."""
    if num_workers < 1:
        raise ValueError(f"num_workers must be >= 1, got {num_workers}")
    return key_hash(encode(key)) % num_workers


def encode_kv(key: bytes, value: bytes) -> bytes:
    """Frame one encoded pair as ``[u32 klen][key][u32 vlen][value]``."""
    if len(key) > MAX_FIELD:
        raise OversizeError(f"key encoding of {len(key)} bytes exceeds {MAX_FIELD}")
    if len(value) > MAX_FIELD:
        raise OversizeError(f"value encoding of {len(value)} bytes exceeds {MAX_FIELD}")
    return b"".join((_U32.pack(len(key)), key, _U32.pack(len(value)), value))


def decode_kv(buf: bytes, offset: int = 0) -> tuple[bytes, bytes, int]:
    """Decode the pair starting at ``offset``.

    Returns ``(key, value, consumed)``.  Bytes after the pair are left
    alone; ``consumed`` tells the caller where the next frame starts.
    """
    end = len(buf)
    pos = offset
    if end - pos < 4:
        raise MalformedFrameError(f"need 4 bytes for key length at offset {pos}, have {end - pos}")
    (klen,) = _U32.unpack_from(buf, pos)
    pos += 4
    if end - pos < klen + 4:
        raise MalformedFrameError(f"truncated key or value length at offset {pos}")
    key = bytes(buf[pos:pos + klen])
    pos += klen
    (vlen,) = _U32.unpack_from(buf, pos)
    pos += 4
    if end - pos < vlen:
        raise MalformedFrameError(f"value of {vlen} bytes truncated at offset {pos}")
    value = bytes(buf[pos:pos + vlen])
    pos += vlen
    return key, value, pos - offset


def iter_kv(buf: bytes) -> Iterator[tuple[bytes, bytes]]:
    """Yield every encoded pair in a concatenated stream."""
    pos = 0
    while pos < len(buf):
        key, value, used = decode_kv(buf, pos)
        pos += used
        yield key, value


def encode_pairs(pairs: Iterable[tuple[Any, Any]], key_codec: Codec, value_codec: Codec) -> bytes:
    kenc = key_codec.encode
    venc = value_codec.encode
    return b"".join(encode_kv(kenc(k), venc(v)) for k, v in pairs)


def decode_pairs(buf: bytes, key_codec: Codec, value_codec: Codec) -> list[tuple[Any, Any]]:
    kdec = key_codec.decode
    vdec = value_codec.decode
    return [(kdec(k), vdec(v)) for k, v in iter_kv(buf)]
