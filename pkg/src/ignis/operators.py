"""Operator implementations over partition groups, executed inside executors.

Narrow operators (map, filter, flatmap, the pair views, mapPartitions, sample)
are fused: a chain of them runs as one generator pipeline per partition, so a
map.filter.map chain costs exactly one pass over each partition (the pass
counter in the context metrics proves it). Wide operators exchange data among
the worker's executors through the base communicator: keys are routed to
executor hash(key) mod p, which is the one routing rule shared by groupByKey,
reduceByKey, join and distinct so that equal keys always co-locate.

Partition indices are global and assigned to executors in contiguous blocks
(executor 0 owns the first block and so on), which makes driver-side
collection in (rank, partition, element) order equal to plain partition
order.
"""

import heapq
import json
import math
import os

from .errors import (
    EmptyDataframeError,
    IgnisIoError,
    NonPairElementError,
    UserFnError,
)
from .storage import PartitionGroup, new_partition, partition_bytes, container_values
from .values import (
    compare_values,
    hash_value,
    serialize_value,
    deserialize_value,
    sorted_decorated,
    sorted_values,
    value_key,
    value_to_json,
)

_M64 = (1 << 64) - 1


# -- deterministic sampling PRNG -----------------------------------------------------

def splitmix64(seed):
    """The splitmix64 sequence; deterministic across platforms."""
    state = seed & _M64
    while True:
        state = (state + 0x9E3779B97F4A7C15) & _M64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
        yield (z ^ (z >> 31)) & _M64


def _rng_floats(seed):
    for x in splitmix64(seed):
        yield (x >> 11) * (2.0 ** -53)


def _poisson(lam, floats):
    # Knuth's method; lam is small (a sampling fraction)
    limit = math.exp(-lam)
    k = 0
    p = 1.0
    while True:
        p *= next(floats)
        if p <= limit:
            return k
        k += 1


def packed_partition_index(rank, local_index):
    """Stable global partition identifier used to seed per-partition PRNGs."""
    return (rank << 20) | local_index


# -- block ownership of global partition indices -----------------------------------

def partitions_of_rank(rank, total, executors):
    """Contiguous block of global partition indices owned by one executor."""
    q, r = divmod(total, executors)
    start = rank * q + min(rank, r)
    return list(range(start, start + q + (1 if rank < r else 0)))


def rank_of_partition(index, total, executors):
    q, r = divmod(total, executors)
    boundary = r * (q + 1)
    if index < boundary:
        return index // (q + 1)
    if q == 0:
        return executors - 1
    return r + (index - boundary) // q


# -- fused narrow pipeline ------------------------------------------------------------

def _require_pair(v, op):
    if not isinstance(v, tuple):
        raise NonPairElementError(f"{op} needs pair elements, got {type(v).__name__}")
    return v


def _bool_result(v, op):
    if not isinstance(v, bool):
        raise UserFnError(f"{op} predicate must return a bool, got {v!r}")
    return v


def _apply_step(ctx, step, stream, part_index):
    name = step[0]
    fn = step[1]
    if name == "map":
        return (fn(ctx, x) for x in stream)
    if name == "filter":
        return (x for x in stream if _bool_result(fn(ctx, x), "filter"))
    if name == "flatmap":
        def flat(s):
            for x in s:
                out = fn(ctx, x)
                if not isinstance(out, list):
                    raise UserFnError(f"flatmap function must return a list, got {out!r}")
                yield from out
        return flat(stream)
    if name == "keyBy":
        return ((fn(ctx, x), x) for x in stream)
    if name == "mapValues":
        return ((p[0], fn(ctx, p[1])) for p in (_require_pair(x, "mapValues") for x in stream))
    if name == "keys":
        return (_require_pair(x, "keys")[0] for x in stream)
    if name == "values":
        return (_require_pair(x, "values")[1] for x in stream)
    if name == "mapPartitions":
        out = fn(ctx, stream)
        if out is None:
            return iter(())
        return iter(list(out))
    if name == "sample":
        with_replacement, fraction, seed = step[2], step[3], step[4]
        floats = _rng_floats((seed ^ part_index) & _M64)

        def sampler(s):
            for x in s:
                if with_replacement:
                    for _ in range(_poisson(fraction, floats)):
                        yield x
                else:
                    if next(floats) < fraction:
                        yield x
        return sampler(stream)
    raise UserFnError(f"unknown pipeline step {name!r}")


def run_pipeline(ctx, group, steps, out_kind):
    """One pass per partition through the fused chain of narrow steps."""
    out = PartitionGroup()
    base = getattr(ctx, "part_base", None)
    for j, part in enumerate(group):
        index = base + j if base is not None else packed_partition_index(ctx.rank, j)
        ctx.count("passes")
        stream = iter(part)
        for step in steps:
            stream = _apply_step(ctx, step, stream, index)
        dst = new_partition(out_kind)
        i = -1
        try:
            for i, v in enumerate(stream):
                dst.append(v)
        except (NonPairElementError, UserFnError):
            raise
        except Exception as exc:
            raise UserFnError(f"user function raised {exc!r}",
                              partition=index, index=i + 1) from exc
        dst.freeze()
        out.add(dst)
    return out


def stream_pipeline(ctx, group, steps):
    """Like run_pipeline but yields elements (for terminal folds)."""
    base = getattr(ctx, "part_base", None)
    for j, part in enumerate(group):
        index = base + j if base is not None else packed_partition_index(ctx.rank, j)
        ctx.count("passes")
        stream = iter(part)
        for step in steps:
            stream = _apply_step(ctx, step, stream, index)
        yield list(stream)


# -- exchange machinery ----------------------------------------------------------------

def _encode_shipment(parts):
    """parts: list of (partition_index, list of values) -> outbox bytes."""
    payload = []
    for idx, values in parts:
        p = new_partition_from_values(values)
        payload.append((idx, partition_bytes(p, level=0)))
    return serialize_value(payload)


def new_partition_from_values(values, kind=None):
    from .storage import StoreKind

    p = new_partition(kind or StoreKind.memory())
    p.extend(values)
    p.freeze()
    return p


def _decode_shipment(blob):
    out = []
    for idx, container in deserialize_value(blob):
        values, _ = container_values(container)
        out.append((idx, values))
    return out


def _exchange(ctx, per_rank_parts):
    """alltoall of per-rank shipments; returns list of (index, values)."""
    comm = ctx.comm
    p = ctx.executors
    outboxes = []
    for r in range(p):
        parts = [(idx, vals) for idx, vals in per_rank_parts[r] if vals]
        blob = _encode_shipment(parts)
        if r != ctx.rank and parts:
            ctx.count("exchange_messages")
            ctx.count("exchange_bytes", len(blob))
        outboxes.append(blob)
    if p == 1:
        received = [outboxes[0]]
    else:
        received = comm.alltoall(outboxes)
    merged = []
    for blob in received:
        merged.extend(_decode_shipment(blob))
    merged.sort(key=lambda pair: pair[0])
    return merged


def _route_by_key(ctx, streams, key_of):
    """Bucket elements by hash(key) mod p; returns per-rank parts lists."""
    p = ctx.executors
    buckets = [[] for _ in range(p)]
    for values in streams:
        for v in values:
            buckets[hash_value(key_of(v)) % p].append(v)
    return [[(r, buckets[r])] for r in range(p)]


# -- wide operators ---------------------------------------------------------------------

def group_by_key(ctx, streams, out_kind, pre_grouped=False):
    if pre_grouped:
        groups = {}
        order = []
        for values in streams:
            for v in values:
                k, val = _require_pair(v, "groupByKey")
                kb = serialize_value(k)
                if kb not in groups:
                    groups[kb] = (k, [])
                    order.append(kb)
                groups[kb][1].append(val)
        out = new_partition(out_kind)
        for kb in order:
            k, vals = groups[kb]
            out.append((k, vals))
        out.freeze()
        return PartitionGroup([out])
    parts = _route_by_key(ctx, streams, lambda v: _require_pair(v, "groupByKey")[0])
    merged = _exchange(ctx, parts)
    return group_by_key(ctx, [vals for _, vals in merged], out_kind, pre_grouped=True)


def reduce_by_key(ctx, streams, op, out_kind, pre_grouped=False):
    def combine(values_iterables):
        acc = {}
        order = []
        for values in values_iterables:
            for v in values:
                k, val = _require_pair(v, "reduceByKey")
                kb = serialize_value(k)
                if kb in acc:
                    acc[kb] = (k, op(ctx, acc[kb][1], val))
                else:
                    acc[kb] = (k, val)
                    order.append(kb)
        return acc, order

    acc, order = combine(streams)  # local combine before any exchange
    if pre_grouped or ctx.executors == 1:
        combined = [(acc[kb][0], acc[kb][1]) for kb in order]
    else:
        parts = _route_by_key(ctx, [[(k, v) for k, v in (acc[kb] for kb in order)]],
                              lambda pair: pair[0])
        merged = _exchange(ctx, parts)
        acc2, order2 = combine([vals for _, vals in merged])
        combined = [(acc2[kb][0], acc2[kb][1]) for kb in order2]
    out = new_partition_from_values(combined, out_kind)
    return PartitionGroup([out])


def aggregate_by_key(ctx, streams, zero, seq_op, comb_op, out_kind):
    acc = {}
    order = []
    for values in streams:
        for v in values:
            k, val = _require_pair(v, "aggregateByKey")
            kb = serialize_value(k)
            if kb not in acc:
                acc[kb] = (k, zero)
                order.append(kb)
            acc[kb] = (k, seq_op(ctx, acc[kb][1], val))
    locals_ = [(acc[kb][0], acc[kb][1]) for kb in order]
    if ctx.executors == 1:
        out = new_partition_from_values(locals_, out_kind)
        return PartitionGroup([out])
    return reduce_by_key(ctx, [locals_], comb_op, out_kind)


def count_by(ctx, streams, by_key, out_kind):
    def key_of(v):
        return _require_pair(v, "countByKey")[0] if by_key else v

    counts = {}
    order = []
    for values in streams:
        for v in values:
            k = key_of(v)
            kb = serialize_value(k)
            if kb not in counts:
                counts[kb] = (k, 0)
                order.append(kb)
            counts[kb] = (k, counts[kb][1] + 1)
    locals_ = [(counts[kb][0], counts[kb][1]) for kb in order]
    add = lambda c, a, b: a + b
    return reduce_by_key(ctx, [locals_], add, out_kind)


def distinct(ctx, streams, out_kind):
    seen = {}
    order = []
    for values in streams:
        for v in values:
            vb = serialize_value(v)
            if vb not in seen:
                seen[vb] = v
                order.append(vb)
    local = [seen[vb] for vb in order]
    if ctx.executors > 1:
        parts = _route_by_key(ctx, [local], lambda v: v)
        merged = _exchange(ctx, parts)
        seen2 = {}
        order2 = []
        for _, vals in merged:
            for v in vals:
                vb = serialize_value(v)
                if vb not in seen2:
                    seen2[vb] = v
                    order2.append(vb)
        local = [seen2[vb] for vb in order2]
    return PartitionGroup([new_partition_from_values(local, out_kind)])


def join(ctx, left_streams, right_values, out_kind, co_partitioned=False):
    """Inner join; both sides routed by key unless already co-partitioned."""
    left = []
    for values in left_streams:
        for v in values:
            left.append(_require_pair(v, "join"))
    right = [_require_pair(v, "join") for v in right_values]
    if ctx.executors > 1 and not co_partitioned:
        merged_l = _exchange(ctx, _route_by_key(ctx, [left], lambda p: p[0]))
        left = [v for _, vals in merged_l for v in vals]
        merged_r = _exchange(ctx, _route_by_key(ctx, [right], lambda p: p[0]))
        right = [v for _, vals in merged_r for v in vals]
    table = {}
    order = []
    for k, v in left:
        kb = serialize_value(k)
        if kb not in table:
            table[kb] = (k, [])
            order.append(kb)
        table[kb][1].append(v)
    out = new_partition(out_kind)
    for k, w in right:
        kb = serialize_value(k)
        if kb in table:
            for v in table[kb][1]:
                out.append((k, (v, w)))
    out.freeze()
    return PartitionGroup([out])


def union(left_group, right_group):
    return PartitionGroup(list(left_group) + list(right_group))


def repartition(ctx, streams, n, out_kind):
    """Block round-robin into n near-equal partitions."""
    local = [v for values in streams for v in values]
    p = ctx.executors
    counts = [len(local)]
    if p > 1:
        gathered = ctx.comm.gather(0, serialize_value(len(local)))
        blob = serialize_value([deserialize_value(b) for b in gathered]) if ctx.rank == 0 else None
        counts = deserialize_value(ctx.comm.broadcast(0, blob))
    total = sum(counts)
    offset = sum(counts[: ctx.rank])
    q, r = divmod(total, n)

    def target_partition(global_index):
        # first r partitions hold q+1 elements, the rest q
        boundary = r * (q + 1)
        if global_index < boundary:
            return global_index // (q + 1)
        return r + (global_index - boundary) // q if q else n - 1

    per_rank = [[] for _ in range(p)]
    assignments = {}
    for i, v in enumerate(local):
        t = target_partition(offset + i)
        owner = rank_of_partition(t, n, p)
        assignments.setdefault((owner, t), []).append(v)
    for (owner, t), vals in assignments.items():
        per_rank[owner].append((t, vals))
    for rk in range(p):
        per_rank[rk].sort(key=lambda pair: pair[0])
    merged = _exchange(ctx, per_rank) if p > 1 else per_rank[0]
    return _assemble_partitions(ctx, merged, n, out_kind)


def partition_by(ctx, streams, fn, n, out_kind):
    p = ctx.executors
    per_rank = [[] for _ in range(p)]
    buckets = {}
    for values in streams:
        for v in values:
            t = hash_value(fn(ctx, v)) % n
            buckets.setdefault(t, []).append(v)
    for t, vals in buckets.items():
        per_rank[rank_of_partition(t, n, p)].append((t, vals))
    for rk in range(p):
        per_rank[rk].sort(key=lambda pair: pair[0])
    merged = _exchange(ctx, per_rank) if p > 1 else per_rank[0]
    return _assemble_partitions(ctx, merged, n, out_kind)


def _assemble_partitions(ctx, merged, n, out_kind):
    """Build this rank's owned partitions (by global index) from shipments."""
    mine = partitions_of_rank(ctx.rank, n, ctx.executors)
    slots = {idx: new_partition(out_kind) for idx in mine}
    for idx, values in merged:
        slots[idx].extend(values)
    group = PartitionGroup()
    for idx in mine:
        slots[idx].freeze()
        group.add(slots[idx])
    return group


# -- sorting (regular sampling) ------------------------------------------------------------

def _cmp_images(a, b, ascending):
    c = compare_values(a, b)
    return c if ascending else -c


def _bucket_index(image, pivots, ascending):
    lo, hi = 0, len(pivots)
    while lo < hi:
        mid = (lo + hi) // 2
        if _cmp_images(pivots[mid], image, ascending) < 0:
            lo = mid + 1
        else:
            hi = mid
    return lo


def sort_by(ctx, streams, image_fn, ascending, out_kind):
    """Regular-sampling parallel sort; output globally ordered by rank."""
    decorated = []
    for values in streams:
        for v in values:
            decorated.append((image_fn(ctx, v) if image_fn else v, v))
    decorated = sorted_decorated(decorated, reverse=not ascending)
    p = ctx.executors
    if p == 1:
        out = new_partition_from_values([v for _, v in decorated], out_kind)
        return PartitionGroup([out])

    comm = ctx.comm
    m = len(decorated)
    samples = [decorated[(j * m) // p][0] for j in range(p)] if m else []
    gathered = comm.gather(0, serialize_value(samples))
    if ctx.rank == 0:
        all_samples = []
        for blob in gathered:
            all_samples.extend(deserialize_value(blob))
        all_samples = sorted(all_samples, key=value_key, reverse=not ascending)
        L = len(all_samples)
        if L:
            pivots = [all_samples[min(L - 1, ((i + 1) * L) // p)] for i in range(p - 1)]
        else:
            pivots = []
        pivot_blob = serialize_value(pivots)
    else:
        pivot_blob = None
    pivots = deserialize_value(comm.broadcast(0, pivot_blob))

    buckets = [[] for _ in range(p)]
    for image, v in decorated:
        b = _bucket_index(image, pivots, ascending) if pivots else 0
        buckets[b].append((image, v))
    per_rank = [[(r, buckets[r])] for r in range(p)]
    merged = _exchange(ctx, per_rank)
    runs = [vals for _, vals in merged if vals]
    key = lambda pair: value_key(pair[0])
    ordered = list(heapq.merge(*runs, key=key, reverse=not ascending))
    ctx.metrics["sort_load"] = len(ordered)
    out = new_partition_from_values([v for _, v in ordered], out_kind)
    return PartitionGroup([out])


# -- terminal actions -------------------------------------------------------------------------

def _as_number_add(a, b):
    return a + b


def count_all(ctx, streams):
    local = sum(len(values) for values in streams)
    if ctx.executors == 1:
        return local
    return ctx.comm.allreduce(local, _as_number_add)


def reduce_all(ctx, streams, op, tree):
    has = False
    acc = None
    for values in streams:
        for v in values:
            acc = v if not has else op(ctx, acc, v)
            has = True
    if ctx.executors > 1:
        def combine(a, b):
            if not a[0]:
                return b
            if not b[0]:
                return a
            return [True, op(ctx, a[1], b[1])]

        result = ctx.comm.reduce(0, [has, acc], combine, tree=tree)
        if ctx.rank != 0:
            return None
        has, acc = result
    if not has:
        raise EmptyDataframeError("reduce on an empty dataframe")
    return acc


def aggregate_all(ctx, streams, zero, seq_op, comb_op, tree):
    folds = []
    for values in streams:
        part_acc = zero
        for v in values:
            part_acc = seq_op(ctx, part_acc, v)
        folds.append(part_acc)
    local = zero
    for f in folds:
        local = comb_op(ctx, local, f)
    if ctx.executors == 1:
        return local
    result = ctx.comm.reduce(0, local, lambda a, b: comb_op(ctx, a, b), tree=tree)
    return result if ctx.rank == 0 else None


def max_min(ctx, streams, image_fn, want_max):
    has = False
    best = None
    best_image = None
    for values in streams:
        for v in values:
            image = image_fn(ctx, v) if image_fn else v
            if not has:
                has, best, best_image = True, v, image
            else:
                c = compare_values(image, best_image)
                if (c > 0) if want_max else (c < 0):
                    best, best_image = v, image
    if ctx.executors > 1:
        def pick(a, b):
            if not a[0]:
                return b
            if not b[0]:
                return a
            c = compare_values(b[1], a[1])
            take_b = (c > 0) if want_max else (c < 0)
            return b if take_b else a

        result = ctx.comm.reduce(0, [has, best_image, best], pick)
        if ctx.rank != 0:
            return None
        has, _, best = result
    if not has:
        raise EmptyDataframeError("max/min on an empty dataframe")
    return best


def take_local(streams, n):
    out = []
    for values in streams:
        for v in values:
            if len(out) >= n:
                return out
            out.append(v)
    return out


def top_local(streams, n):
    flat = [v for values in streams for v in values]
    return sorted_values(flat, reverse=True)[:n]


def take_by_positions(streams, positions):
    """positions: sorted local element offsets to pick."""
    wanted = set(positions)
    out = []
    for i, v in enumerate(v for values in streams for v in values):
        if i in wanted:
            out.append(v)
    return out


# -- file I/O -----------------------------------------------------------------------------------

def read_text_splits(path, splits):
    """Read newline-aligned byte ranges; one partition per split."""
    groups = []
    try:
        with open(path, "rb") as f:
            for start, end in splits:
                lines = []
                if start > 0:
                    f.seek(start - 1)
                    f.readline()  # the line spanning the boundary belongs to the left split
                else:
                    f.seek(0)
                while True:
                    pos = f.tell()
                    if pos >= end:
                        break
                    raw = f.readline()
                    if not raw:
                        break
                    lines.append(raw.rstrip(b"\r\n").decode("utf-8", errors="replace"))
                groups.append(lines)
    except OSError as exc:
        raise IgnisIoError(f"cannot read {path!r}: {exc}") from exc
    return groups


def _render_text(v):
    if isinstance(v, str):
        return v
    try:
        return json.dumps(value_to_json(v), separators=(",", ":"), allow_nan=False)
    except ValueError as exc:
        raise IgnisIoError(f"cannot render {v!r} as text: {exc}") from exc


def save_partitions(group, path, indices, fmt):
    """Write one part-file per partition at its global index."""
    try:
        os.makedirs(path, exist_ok=True)
        written = []
        for part, idx in zip(group, indices):
            if fmt == "object":
                name = os.path.join(path, f"part-{idx:05d}.ignp")
                with open(name, "wb") as f:
                    f.write(partition_bytes(part))
            elif fmt == "json":
                name = os.path.join(path, f"part-{idx:05d}.json")
                with open(name, "w", encoding="utf-8") as f:
                    json.dump([value_to_json(v) for v in part], f, allow_nan=False)
            else:
                name = os.path.join(path, f"part-{idx:05d}.txt")
                with open(name, "w", encoding="utf-8") as f:
                    for v in part:
                        f.write(_render_text(v))
                        f.write("\n")
            written.append(name)
        return written
    except OSError as exc:
        raise IgnisIoError(f"cannot write to {path!r}: {exc}") from exc
    except ValueError as exc:
        raise IgnisIoError(f"cannot encode as JSON: {exc}") from exc


def read_object_files(paths, kind):
    group = PartitionGroup()
    for p in paths:
        try:
            with open(p, "rb") as f:
                buf = f.read()
        except OSError as exc:
            raise IgnisIoError(f"cannot read {p!r}: {exc}") from exc
        values, _ = container_values(buf)
        group.add(new_partition_from_values(values, kind))
    return group


def read_json_files(paths, kind):
    from .values import json_to_value

    group = PartitionGroup()
    for p in paths:
        try:
            with open(p, "r", encoding="utf-8") as f:
                data = json.load(f)
        except OSError as exc:
            raise IgnisIoError(f"cannot read {p!r}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise IgnisIoError(f"{p!r} is not valid JSON: {exc}") from exc
        if not isinstance(data, list):
            raise IgnisIoError(f"{p!r} must hold a top-level JSON array")
        group.add(new_partition_from_values([json_to_value(x) for x in data], kind))
    return group
