#!/usr/bin/env python3
# Partition storage tiers: the same ordered elements behind three backings,
# and the one container format they all serialize to.

import tempfile

from ignis.storage import StoreKind, new_partition, partition_bytes, partition_from_bytes, spill

content = [("sensor", i) for i in range(5)] + ["marker", 2.5, None]

# in-memory: plain objects, fastest
mem = new_partition(StoreKind.memory())
mem.extend(content)
mem.freeze()

# raw memory: serialized into a growable buffer, zlib at level 6 by default
raw = spill(mem, StoreKind.raw(6))
print("raw tier size:", raw.stored_size(), "bytes for", len(raw), "elements")

# disk: the buffer is a file, streamed, never fully in memory
with tempfile.TemporaryDirectory() as d:
    disk = spill(raw, StoreKind.disk(9, d))
    print("disk file:", disk.path)
    print("same content on every tier:", list(disk) == content)

    # the wire/disk container: magic, version, level, count, DEFLATE body
    blob = partition_bytes(disk)
    print("container header:", blob[:6], "count:", int.from_bytes(blob[6:14], "little"))
    back = partition_from_bytes(blob, StoreKind.memory())
    print("container roundtrip:", list(back) == content)
