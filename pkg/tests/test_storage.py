"""Storage tier tests: tier transparency, spills, container format."""

import struct
import zlib

import pytest

from ignis.errors import MalformedContainerError
from ignis.storage import (
    PartitionGroup,
    StoreKind,
    container_values,
    new_partition,
    partition_bytes,
    partition_from_bytes,
    spill,
)
from ignis.values import serialize_value

CONTENT = [1, "two", (3, [4.5, None]), b"\x00six", True]


def fill(kind, values=CONTENT):
    p = new_partition(kind)
    p.extend(values)
    p.freeze()
    return p


KINDS = [
    StoreKind.memory(),
    StoreKind.raw(0),
    StoreKind.raw(6),
    StoreKind.raw(9),
    StoreKind.disk(0),
    StoreKind.disk(6),
    StoreKind.disk(9),
]


@pytest.mark.parametrize("kind", KINDS, ids=lambda k: f"{k.kind}-{k.level}")
def test_append_then_iterate_preserves_order(kind, tmp_path):
    if kind.kind == "disk":
        kind = StoreKind.disk(kind.level, str(tmp_path))
    p = fill(kind)
    assert list(p) == CONTENT
    assert len(p) == len(CONTENT)
    # second iteration works too (read-only after freeze)
    assert list(p) == CONTENT
    p.free()


def test_disk_partition_file_exists(tmp_path):
    p = fill(StoreKind.disk(6, str(tmp_path)))
    assert tmp_path.joinpath(p.path.split("/")[-1]).exists()
    p.free()
    assert not tmp_path.joinpath(p.path.split("/")[-1]).exists()


def test_unwritable_dir_is_io_error():
    from ignis.errors import IgnisIoError

    with pytest.raises(IgnisIoError):
        new_partition(StoreKind.disk(6, "/proc/definitely-not-writable"))


def test_spill_roundtrip_through_disk(tmp_path):
    p = fill(StoreKind.memory())
    d = spill(p, StoreKind.disk(6, str(tmp_path)))
    assert list(d) == CONTENT
    m = spill(d, StoreKind.memory())
    assert list(m) == CONTENT


def test_spill_empty_partition(tmp_path):
    p = fill(StoreKind.memory(), [])
    d = spill(p, StoreKind.disk(6, str(tmp_path)))
    assert list(d) == []
    assert len(d) == 0


def test_compression_shrinks_repetitive_data():
    data = ["repetitive string payload"] * 10_000
    raw = fill(StoreKind.raw(0), data)
    packed = fill(StoreKind.raw(9), data)
    assert packed.stored_size() < raw.stored_size()
    assert list(packed) == data


def test_empty_container_is_header_only():
    p = fill(StoreKind.memory(), [])
    buf = partition_bytes(p)
    assert buf == b"IGNP" + bytes([1, 0]) + (0).to_bytes(8, "little")


def test_container_layout_level0():
    # hand-encoded oracle: header then two raw TLV records
    p = fill(StoreKind.memory(), [1, 2])
    buf = partition_bytes(p, level=0)
    expected = (
        b"IGNP"
        + bytes([1, 0])
        + (2).to_bytes(8, "little")
        + serialize_value(1)
        + serialize_value(2)
    )
    assert buf == expected


def test_level6_container_decompresses_to_level0_body():
    p = fill(StoreKind.memory(), [1, 2])
    buf6 = partition_bytes(p, level=6)
    buf0 = partition_bytes(p, level=0)
    magic, version, level, count = struct.unpack_from("<4sBBQ", buf6, 0)
    assert (magic, version, level, count) == (b"IGNP", 1, 6, 2)
    # the compressed body is a zlib (RFC-1950) stream of the level-0 body
    assert zlib.decompress(buf6[14:]) == buf0[14:]


@pytest.mark.parametrize("kind", KINDS, ids=lambda k: f"{k.kind}-{k.level}")
def test_container_roundtrip(kind, tmp_path):
    if kind.kind == "disk":
        kind = StoreKind.disk(kind.level, str(tmp_path))
    p = fill(kind)
    buf = partition_bytes(p)
    back = partition_from_bytes(buf, StoreKind.memory())
    assert list(back) == CONTENT


def test_malformed_container_bad_magic():
    with pytest.raises(MalformedContainerError) as ei:
        container_values(b"NOPE" + bytes(10))
    assert ei.value.offset == 0


def test_malformed_container_truncated_record():
    p = fill(StoreKind.memory(), [1, 2])
    buf = partition_bytes(p, level=0)
    with pytest.raises(MalformedContainerError):
        container_values(buf[:-2])


def test_malformed_container_trailing_garbage():
    p = fill(StoreKind.memory(), [1])
    buf = partition_bytes(p, level=0) + b"\x00"
    with pytest.raises(MalformedContainerError):
        container_values(buf)


def test_tier_transparency_random_content(tmp_path):
    import random

    rng = random.Random(7)
    content = []
    for _ in range(500):
        pick = rng.randrange(5)
        if pick == 0:
            content.append(rng.randrange(-(2**40), 2**40))
        elif pick == 1:
            content.append(rng.random())
        elif pick == 2:
            content.append("s" * rng.randrange(0, 30))
        elif pick == 3:
            content.append((rng.randrange(100), "v"))
        else:
            content.append([rng.randrange(10)] * rng.randrange(3))
    reference = None
    for level in (0, 6, 9):
        for kind in (
            StoreKind.memory(),
            StoreKind.raw(level),
            StoreKind.disk(level, str(tmp_path)),
        ):
            p = fill(kind, content)
            got = list(p)
            if reference is None:
                reference = got
            assert got == reference == content
            p.free()


def test_partition_group_accounting():
    g = PartitionGroup([fill(StoreKind.memory(), [1, 2]), fill(StoreKind.memory(), [])])
    assert g.total_elements() == 2
    assert len(g) == 2
    assert list(g.elements()) == [1, 2]
