"""Partition storage tiers behind one contract.

Three tiers hold the same ordered element sequence:

  * in-memory: a plain Python list, fastest, highest footprint;
  * raw memory: elements are serialized into a growable byte buffer on append
    (never a whole-buffer copy per element) and the buffer is DEFLATE-wrapped
    when the partition is frozen, if the level is above zero;
  * disk: the same buffer streamed into a file; never materializes the whole
    partition in memory.

A partition is single-writer while it is being built and read-only afterwards
(freeze()). The byte form of a partition is the container below, used both on
disk and on the wire, so a spilled file, an object file and a shuffle payload
are the same bytes:

    magic "IGNP" | u8 version=1 | u8 level | u64 LE element count | body

where body is the concatenated TLV records, zlib-wrapped iff level > 0.
"""

import io
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass

from .errors import IgnisIoError, MalformedContainerError, MalformedEncodingError
from .values import read_value, serialize_value, write_value

MAGIC = b"IGNP"
VERSION = 1
_HEADER = struct.Struct("<4sBBQ")  # magic, version, level, count
DEFAULT_LEVEL = 6

_CHUNK = 64 * 1024


@dataclass(frozen=True)
class StoreKind:
    kind: str                 # "memory" | "rawmemory" | "disk"
    level: int = DEFAULT_LEVEL
    directory: str = ""

    def __post_init__(self):
        if self.kind not in ("memory", "rawmemory", "disk"):
            raise ValueError(f"unknown storage tier {self.kind!r}")
        if not 0 <= self.level <= 9:
            raise ValueError("compression level must be in 0..9")

    @staticmethod
    def memory():
        return StoreKind("memory", 0)

    @staticmethod
    def raw(level=DEFAULT_LEVEL):
        return StoreKind("rawmemory", level)

    @staticmethod
    def disk(level=DEFAULT_LEVEL, directory=""):
        return StoreKind("disk", level, directory)

    @staticmethod
    def from_properties(props, directory=""):
        name = props.get("ignis.partition.storage").strip().lower()
        level = props.get_int("ignis.partition.compression")
        directory = directory or props.get("ignis.partition.directory")
        if name == "memory":
            return StoreKind.memory()
        if name == "rawmemory":
            return StoreKind.raw(level)
        if name == "disk":
            return StoreKind.disk(level, directory)
        raise ValueError(f"unknown storage tier {name!r}")


class Partition:
    """Ordered element container; iteration order equals append order."""

    store: StoreKind

    def append(self, v):
        raise NotImplementedError

    def extend(self, values):
        for v in values:
            self.append(v)

    def freeze(self):
        """End of construction; the partition becomes read-only."""

    def free(self):
        """Release the backing buffer or file."""

    def __iter__(self):
        raise NotImplementedError

    def __len__(self):
        raise NotImplementedError

    def stored_size(self):
        """Bytes held by the backing store (post-freeze for compressed tiers)."""
        raise NotImplementedError


class MemoryPartition(Partition):
    def __init__(self, store):
        self.store = store
        self._items = []

    def append(self, v):
        self._items.append(v)

    def extend(self, values):
        self._items.extend(values)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def free(self):
        self._items = []

    def stored_size(self):
        return sum(len(serialize_value(v)) for v in self._items)


class RawPartition(Partition):
    def __init__(self, store):
        self.store = store
        self._buf = bytearray()
        self._count = 0
        self._frozen = None  # compressed (or raw) bytes after freeze

    def append(self, v):
        if self._frozen is not None:
            raise IgnisIoError("partition is frozen")
        write_value(v, self._buf)
        self._count += 1

    def freeze(self):
        if self._frozen is None:
            raw = bytes(self._buf)
            self._frozen = zlib.compress(raw, self.store.level) if self.store.level else raw
            self._buf = bytearray()

    def _body(self):
        if self._frozen is None:
            return bytes(self._buf)
        if self.store.level:
            return zlib.decompress(self._frozen)
        return self._frozen

    def __iter__(self):
        buf = self._body()
        offset = 0
        for _ in range(self._count):
            v, offset = read_value(buf, offset)
            yield v

    def __len__(self):
        return self._count

    def free(self):
        self._buf = bytearray()
        self._frozen = b""
        self._count = 0

    def stored_size(self):
        return len(self._frozen) if self._frozen is not None else len(self._buf)


class DiskPartition(Partition):
    """A partition whose buffer is a file holding the container format."""

    def __init__(self, store):
        self.store = store
        directory = store.directory or tempfile.gettempdir()
        try:
            os.makedirs(directory, exist_ok=True)
            fd, self.path = tempfile.mkstemp(prefix="ignis-part-", suffix=".ignp", dir=directory)
        except OSError as exc:
            raise IgnisIoError(f"cannot create partition file in {directory!r}: {exc}") from exc
        self._file = os.fdopen(fd, "wb+")
        self._file.write(_HEADER.pack(MAGIC, VERSION, store.level, 0))
        self._count = 0
        self._frozen = False
        self._compressor = zlib.compressobj(store.level) if store.level else None

    def append(self, v):
        if self._frozen:
            raise IgnisIoError("partition is frozen")
        out = bytearray()
        write_value(v, out)
        if self._compressor:
            self._file.write(self._compressor.compress(bytes(out)))
        else:
            self._file.write(out)
        self._count += 1

    def freeze(self):
        if self._frozen:
            return
        if self._compressor:
            self._file.write(self._compressor.flush())
            self._compressor = None
        self._file.seek(0)
        self._file.write(_HEADER.pack(MAGIC, VERSION, self.store.level, self._count))
        self._file.flush()
        self._frozen = True

    def __iter__(self):
        self.freeze()
        with open(self.path, "rb") as f:
            f.seek(_HEADER.size)
            if self.store.level:
                stream = _inflate_chunks(f)
            else:
                stream = iter(lambda: f.read(_CHUNK), b"")
            yield from _decode_stream(stream, self._count)

    def __len__(self):
        return self._count

    def free(self):
        try:
            self._file.close()
        except OSError:
            pass
        try:
            os.unlink(self.path)
        except OSError:
            pass

    def stored_size(self):
        self.freeze()
        return os.path.getsize(self.path) - _HEADER.size


def _inflate_chunks(f):
    d = zlib.decompressobj()
    for chunk in iter(lambda: f.read(_CHUNK), b""):
        out = d.decompress(chunk)
        if out:
            yield out
    tail = d.flush()
    if tail:
        yield tail


def _decode_stream(chunks, count):
    # Decode `count` TLV records from an iterator of byte chunks, keeping only
    # the undecoded tail in memory.
    buf = b""
    offset = 0
    produced = 0
    chunks = iter(chunks)
    while produced < count:
        try:
            v, offset = read_value(buf, offset)
        except MalformedEncodingError as exc:
            nxt = next(chunks, None)
            if nxt is None:
                raise MalformedContainerError(f"container body ends mid-record: {exc}", offset)
            buf = buf[offset:] + nxt
            offset = 0
            continue
        produced += 1
        yield v
        if offset > _CHUNK:
            buf = buf[offset:]
            offset = 0


def new_partition(kind):
    if kind.kind == "memory":
        return MemoryPartition(kind)
    if kind.kind == "rawmemory":
        return RawPartition(kind)
    return DiskPartition(kind)


def spill(p, to):
    """Move a partition to another tier; the source is freed."""
    out = new_partition(to)
    out.extend(p)
    out.freeze()
    p.free()
    return out


def partition_bytes(p, level=None):
    """Serialize a partition into the container format."""
    if level is None:
        level = p.store.level if p.store.kind != "memory" else 0
    body = bytearray()
    count = 0
    for v in p:
        write_value(v, body)
        count += 1
    payload = zlib.compress(bytes(body), level) if level else bytes(body)
    return _HEADER.pack(MAGIC, VERSION, level, count) + payload


def partition_from_bytes(buf, kind):
    """Materialize a container into a partition of the given tier."""
    values, count = container_values(buf)
    out = new_partition(kind)
    out.extend(values)
    out.freeze()
    return out


def container_values(buf):
    """Decode a container; returns (iterator-friendly list of values, count)."""
    if len(buf) < _HEADER.size:
        raise MalformedContainerError("container shorter than its header", len(buf))
    magic, version, level, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise MalformedContainerError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise MalformedContainerError(f"unsupported container version {version}", 4)
    if level > 9:
        raise MalformedContainerError(f"bad compression level {level}", 5)
    body = buf[_HEADER.size:]
    if level:
        try:
            body = zlib.decompress(body)
        except zlib.error as exc:
            raise MalformedContainerError(f"bad DEFLATE body: {exc}", _HEADER.size) from exc
    values = []
    offset = 0
    for _ in range(count):
        try:
            v, offset = read_value(body, offset)
        except Exception as exc:
            raise MalformedContainerError(f"bad record: {exc}", _HEADER.size + offset) from exc
        values.append(v)
    if offset != len(body):
        raise MalformedContainerError("trailing bytes after last record", _HEADER.size + offset)
    return values, count


class PartitionGroup:
    """The partitions owned by one executor, in order."""

    def __init__(self, partitions=None):
        self.partitions = list(partitions) if partitions else []

    def add(self, p):
        self.partitions.append(p)

    def total_elements(self):
        return sum(len(p) for p in self.partitions)

    def elements(self):
        for p in self.partitions:
            yield from p

    def freeze(self):
        for p in self.partitions:
            p.freeze()
        return self

    def free(self):
        for p in self.partitions:
            p.free()
        self.partitions = []

    def __len__(self):
        return len(self.partitions)

    def __iter__(self):
        return iter(self.partitions)
