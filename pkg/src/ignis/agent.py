"""Executor process: one per executor, spawned by the backend.

The agent binds a transport endpoint from the configured port list, announces
itself to the backend with a hello event, then serves control commands
sequentially: build or drop communicators, import function libraries, execute
stages, ship cache replicas, report metrics, shut down. Collectives inside a
stage run against the worker's base communicator, which the backend rebuilds
(new id, epoch+1) whenever membership changes.

Executors never talk to the scheduler about each other; peer failures surface
as transport errors in whatever stage is running and are reported back in the
command reply, where the backend turns them into recovery.
"""

import argparse
import base64
import json
import os
import sys
import threading
import time
import traceback

from .comm import CommSpec, Communicator
from .context import Context
from .errors import IgnisError, error_kind
from .model import Properties
from .operators import (
    aggregate_all,
    aggregate_by_key,
    count_all,
    count_by,
    distinct,
    group_by_key,
    join,
    max_min,
    new_partition_from_values,
    partition_by,
    rank_of_partition,
    read_json_files,
    read_object_files,
    read_text_splits,
    reduce_all,
    reduce_by_key,
    repartition,
    run_pipeline,
    save_partitions,
    sort_by,
    stream_pipeline,
    take_by_positions,
    take_local,
    top_local,
    union,
)
from .registry import SourceRef, load_library, resolve
from .storage import (
    PartitionGroup,
    StoreKind,
    container_values,
    partition_bytes,
)
from .transport import OP_CTRL, Endpoint
from .values import deserialize_value, serialize_value


class Agent:
    def __init__(self, endpoint, worker_id, rank, executors, namespace, props, driver_ident):
        self.endpoint = endpoint
        self.worker_id = worker_id
        self.rank = rank
        self.executors = executors
        self.namespace = namespace
        self.props = props
        self.driver_ident = driver_ident
        self.comms = {}            # comm_id -> Communicator
        self.base_comm_ids = {}    # worker_id -> comm_id
        self.slots = {}            # node_id -> PartitionGroup
        self.replicas = {}         # node_id -> list of container bytes
        self.metrics = {"stages": 0, "passes": 0, "exchange_messages": 0, "exchange_bytes": 0}
        self.default_kind = StoreKind.from_properties(props)
        self._stop = False
        self._gather_done = False

    # -- plumbing -----------------------------------------------------------------

    def comm_for(self, worker_id):
        comm_id = self.base_comm_ids.get(f"base:{worker_id}")
        return self.comms.get(comm_id) if comm_id is not None else None

    def context(self, worker_id, variables=None, state=None):
        base = self.comm_for(worker_id)
        return Context(
            worker_id, self.rank, self.executors, self.props,
            variables=variables, comm=base, state=state, metrics=self.metrics,
        )

    def _fn(self, src_value, ctx):
        if src_value is None:
            return None, {}
        src = SourceRef.from_value(src_value)
        fn = resolve(src.kind, src.target, self.namespace)
        return fn, src.params

    def _steps(self, step_values):
        """Decode narrow steps into (name, callable, extras...) tuples."""
        steps = []
        for sv in step_values:
            name = sv[0]
            if name in ("keys", "values"):
                steps.append((name, None))
            elif name == "sample":
                steps.append((name, None, bool(sv[2]), float(sv[3]), int(sv[4])))
            else:
                src = SourceRef.from_value(sv[1])
                fn = resolve(src.kind, src.target, self.namespace)
                steps.append((name, _BoundFn(fn, src.params)))
        return steps

    # -- command loop ----------------------------------------------------------------

    def run(self):
        while not self._stop:
            sender, seq, command = self.endpoint.control.get()
            if seq == 0:
                continue  # events need no processing on the agent side
            try:
                result = self.dispatch(command)
                reply = ["ok"] + (result if result is not None else [])
            except BaseException as exc:  # every failure must produce a reply
                reply = ["err", error_kind(exc), f"{exc}", traceback.format_exc(limit=8)]
            try:
                self.endpoint.reply(sender, seq, reply)
            except Exception:
                pass  # backend died; the orphan watchdog will take us down

    def dispatch(self, command):
        name = command[0]
        if name == "ping":
            return [self.worker_id, self.rank, os.getpid()]
        if name == "shutdown":
            self._stop = True
            return []
        if name == "import_lib":
            return [load_library(command[1])]
        if name == "build_comm":
            return self._build_comm(command)
        if name == "drop_comm":
            self.endpoint.invalidate_comm(command[1])
            self.comms.pop(command[1], None)
            return []
        if name == "exec":
            return self._exec_stage(command[1])
        if name == "metrics":
            return [self._metrics_value()]
        if name == "clear_slots":
            keep = set(command[1])
            for node_id in list(self.slots):
                if node_id not in keep:
                    self.slots.pop(node_id).free()
            for node_id in list(self.replicas):
                if node_id not in keep:
                    self.replicas.pop(node_id)
            return []
        if name == "drop_slot":
            node_id = command[1]
            if node_id in self.slots:
                self.slots.pop(node_id).free()
            self.replicas.pop(node_id, None)
            return []
        if name == "share_send":
            return self._share_send(*command[1:])
        if name == "share_recv":
            return self._share_recv(*command[1:])
        raise IgnisError(f"unknown control command {name!r}")

    # -- communicators ------------------------------------------------------------------

    def _build_comm(self, command):
        _, spec_value, barrier, base_for = command
        spec = CommSpec.from_value(spec_value)
        rank = spec.rank_of(self.endpoint.ident)
        if rank is None:
            raise IgnisError(f"this process is not a member of {spec!r}")
        comm = Communicator(
            self.endpoint, spec, rank,
            connect_timeout=self.props.get_float("ignis.transport.connectTimeout"),
            collective_timeout=self.props.get_float("ignis.transport.collectiveTimeout"),
            probe_interval=self.props.get_float("ignis.transport.probeInterval"),
        )
        comm.open()
        self.comms[spec.comm_id] = comm
        if base_for:
            self.base_comm_ids[base_for] = spec.comm_id
        if barrier:
            comm.barrier()
        return []

    # -- cache replication ----------------------------------------------------------------

    def _share_send(self, node_id, source, to_rank, worker_id):
        comm = self.comm_for(worker_id)
        if source == "replica":
            containers = self.replicas.get(node_id)
            if containers is None:
                raise IgnisError(f"no replica of node {node_id} on rank {self.rank}")
        else:
            group = self.slots.get(node_id)
            if group is None:
                raise IgnisError(f"no slot for node {node_id} on rank {self.rank}")
            containers = [partition_bytes(p) for p in group]
        comm.send(to_rank, serialize_value(containers))
        return []

    def _share_recv(self, node_id, dest, from_rank, worker_id, tier_value):
        comm = self.comm_for(worker_id)
        containers = deserialize_value(comm.recv(from_rank))
        if dest == "replica":
            self.replicas[node_id] = list(containers)
        else:
            kind = self._tier(tier_value) or self.default_kind
            group = PartitionGroup()
            for c in containers:
                values, _ = container_values(c)
                group.add(new_partition_from_values(values, kind))
            self.slots[node_id] = group
        return []

    def _tier(self, tier_value):
        if tier_value is None:
            return None
        kind, level, directory = tier_value
        return StoreKind(kind, int(level), directory)

    def _partition_base(self, ctx, local_count):
        """Global index of this executor's first partition (rank-major)."""
        if ctx.executors == 1:
            return 0
        gathered = ctx.comm.gather(0, serialize_value(local_count))
        blob = serialize_value([deserialize_value(b) for b in gathered]) \
            if ctx.rank == 0 else None
        counts = deserialize_value(ctx.comm.broadcast(0, blob))
        return sum(counts[: ctx.rank])

    # -- stage execution ---------------------------------------------------------------------

    def _exec_stage(self, stage):
        terminal = stage[3]
        joins_driver_gather = terminal[0] in ("collect", "top", "takeByIndex")
        try:
            return self._exec_stage_inner(stage)
        except BaseException:
            if joins_driver_gather and not self._gather_done:
                # the driver is blocked in its gather; contribute emptiness so
                # the collective completes, then report the real failure
                try:
                    self._driver_comm(stage[0]).gather(0, serialize_value([]))
                except Exception:
                    pass
            raise

    def _exec_stage_inner(self, stage):
        (worker_id, input_spec, step_values, terminal, out_node, cache_tier,
         replicate) = stage
        self.metrics["stages"] += 1
        self._gather_done = False
        ctx = self.context(worker_id)
        steps = self._steps(step_values)
        out_kind = self._tier(cache_tier) or self.default_kind

        in_group = self._stage_input(ctx, input_spec, steps)
        result_value = None
        out_group = None

        if any(sv[0] == "sample" for sv in step_values):
            # sampling seeds by global partition index so results are
            # independent of the executor count for a fixed partitioning
            ctx.part_base = self._partition_base(ctx, len(in_group))

        kind = terminal[0]
        if kind in ("call", "iterate") and steps:
            # these terminals consume whole element sets, not streams
            in_group = run_pipeline(ctx, in_group, steps, self.default_kind)
            steps = []
        if kind == "materialize":
            out_group = run_pipeline(ctx, in_group, steps, out_kind)
        elif kind in ("groupByKey", "reduceByKey", "aggregateByKey", "countByKey",
                      "countByValue", "distinct", "sort", "repartition", "partitionBy",
                      "join", "union"):
            out_group = self._wide(ctx, kind, terminal, in_group, steps, out_kind)
        elif kind == "count":
            result_value = count_all(ctx, stream_pipeline(ctx, in_group, steps))
        elif kind == "reduce":
            fn = self._bound(terminal[1])
            result_value = reduce_all(ctx, stream_pipeline(ctx, in_group, steps),
                                      lambda c, a, b: fn(c, a, b), self._tree(terminal[2]))
        elif kind == "aggregate":
            zero = terminal[1]
            seq_fn = self._bound(terminal[2])
            comb_fn = self._bound(terminal[3])
            result_value = aggregate_all(
                ctx, stream_pipeline(ctx, in_group, steps), zero,
                lambda c, a, b: seq_fn(c, a, b), lambda c, a, b: comb_fn(c, a, b),
                self._tree(terminal[4]),
            )
        elif kind == "max":
            fn = self._bound(terminal[1]) if terminal[1] is not None else None
            result_value = max_min(ctx, stream_pipeline(ctx, in_group, steps), fn,
                                   bool(terminal[2]))
        elif kind == "collect":
            limit = terminal[1]
            if limit >= 0:
                picked = take_local(stream_pipeline(ctx, in_group, steps), limit)
                payload = [partition_bytes(new_partition_from_values(picked))]
            else:
                group = run_pipeline(ctx, in_group, steps, StoreKind.memory())
                payload = [partition_bytes(p) for p in group]
            self._gather_done = True
            self._driver_comm(worker_id).gather(0, serialize_value(payload))
        elif kind == "top":
            n = terminal[1]
            best = top_local(stream_pipeline(ctx, in_group, steps), n)
            payload = [partition_bytes(new_partition_from_values(best))]
            self._gather_done = True
            self._driver_comm(worker_id).gather(0, serialize_value(payload))
        elif kind == "takeByIndex":
            positions = terminal[1]
            picked = take_by_positions(stream_pipeline(ctx, in_group, steps), positions)
            payload = [partition_bytes(new_partition_from_values(picked))]
            self._gather_done = True
            self._driver_comm(worker_id).gather(0, serialize_value(payload))
        elif kind == "localCount":
            result_value = sum(len(vs) for vs in stream_pipeline(ctx, in_group, steps))
        elif kind == "save":
            result_value = self._save(ctx, terminal, in_group, steps)
        elif kind == "importSend":
            self._import_send(ctx, terminal, in_group, steps)
        elif kind == "call":
            out_group, result_value = self._call(ctx, terminal, in_group)
        elif kind == "iterate":
            out_group, result_value = self._iterate(ctx, terminal, in_group)
        else:
            raise IgnisError(f"unknown stage terminal {kind!r}")

        if out_node is not None and out_group is not None:
            self.slots[out_node] = out_group
            if replicate and self.executors > 1:
                self._replicate(ctx, out_node, out_group)
        return [result_value]

    def _bound(self, src_value):
        src = SourceRef.from_value(src_value)
        fn = resolve(src.kind, src.target, self.namespace)
        return _BoundFn(fn, src.params)

    def _tree(self, v):
        return None if v is None else bool(v)

    def _driver_comm(self, worker_id):
        comm_id = self.base_comm_ids.get(f"driver:{worker_id}")
        comm = self.comms.get(comm_id)
        if comm is None:
            raise IgnisError(f"no driver communicator for worker {worker_id}")
        return comm

    def _stage_input(self, ctx, input_spec, steps):
        kind = input_spec[0]
        if kind == "slot":
            group = self.slots.get(input_spec[1])
            if group is None:
                raise IgnisError(f"no slot for node {input_spec[1]} on rank {self.rank}")
            return group
        if kind == "none":
            return PartitionGroup()
        if kind == "parallelize":
            blob = self._driver_comm(ctx.worker_id).scatter(0, None)
            containers = deserialize_value(blob)
            group = PartitionGroup()
            for c in containers:
                values, _ = container_values(c)
                group.add(new_partition_from_values(values, self.default_kind))
            return group
        if kind == "textfile":
            path, splits = input_spec[1], input_spec[2]
            lines = read_text_splits(path, [(int(s), int(e)) for s, e in splits])
            group = PartitionGroup()
            for chunk in lines:
                group.add(new_partition_from_values(chunk, self.default_kind))
            return group
        if kind == "objectfile":
            return read_object_files(input_spec[1], self.default_kind)
        if kind == "jsonfile":
            return read_json_files(input_spec[1], self.default_kind)
        if kind == "import_recv":
            return self._import_recv(ctx, input_spec)
        raise IgnisError(f"unknown stage input {kind!r}")

    def _wide(self, ctx, kind, terminal, in_group, steps, out_kind):
        streams = stream_pipeline(ctx, in_group, steps)
        if kind == "groupByKey":
            return group_by_key(ctx, streams, out_kind, pre_grouped=bool(terminal[1]))
        if kind == "reduceByKey":
            fn = self._bound(terminal[1])
            return reduce_by_key(ctx, streams, lambda c, a, b: fn(c, a, b), out_kind,
                                 pre_grouped=bool(terminal[2]))
        if kind == "aggregateByKey":
            zero = terminal[1]
            seq_fn = self._bound(terminal[2])
            comb_fn = self._bound(terminal[3])
            return aggregate_by_key(ctx, streams, zero,
                                    lambda c, a, b: seq_fn(c, a, b),
                                    lambda c, a, b: comb_fn(c, a, b), out_kind)
        if kind == "countByKey":
            return count_by(ctx, streams, True, out_kind)
        if kind == "countByValue":
            return count_by(ctx, streams, False, out_kind)
        if kind == "distinct":
            return distinct(ctx, streams, out_kind)
        if kind == "sort":
            fn = self._bound(terminal[1]) if terminal[1] is not None else None
            return sort_by(ctx, streams, fn, bool(terminal[2]), out_kind)
        if kind == "repartition":
            return repartition(ctx, streams, int(terminal[1]), out_kind)
        if kind == "partitionBy":
            fn = self._bound(terminal[1])
            return partition_by(ctx, streams, fn, int(terminal[2]), out_kind)
        if kind == "join":
            right = self.slots.get(terminal[1])
            if right is None:
                raise IgnisError(f"no slot for join side {terminal[1]}")
            return join(ctx, streams, list(right.elements()), out_kind,
                        co_partitioned=bool(terminal[2]))
        if kind == "union":
            right = self.slots.get(terminal[1])
            if right is None:
                raise IgnisError(f"no slot for union side {terminal[1]}")
            left = run_pipeline(ctx, in_group, steps, out_kind)
            return union(left, right)
        raise IgnisError(f"unknown wide terminal {kind!r}")

    def _save(self, ctx, terminal, in_group, steps):
        fmt, path = terminal[1], terminal[2]
        group = run_pipeline(ctx, in_group, steps, StoreKind.memory())
        # agree on global partition numbering: gather counts, broadcast bases
        counts = [len(group)]
        if ctx.executors > 1:
            gathered = ctx.comm.gather(0, serialize_value(len(group)))
            blob = serialize_value([deserialize_value(b) for b in gathered]) \
                if ctx.rank == 0 else None
            counts = deserialize_value(ctx.comm.broadcast(0, blob))
        base = sum(counts[: ctx.rank])
        indices = list(range(base, base + len(group)))
        save_partitions(group, path, indices, fmt)
        return path

    def _import_send(self, ctx, terminal, in_group, steps):
        inter = self.comms.get(terminal[1])
        if inter is None:
            raise IgnisError("inter-worker communicator not built")
        dst_count = int(terminal[2])
        src_count = ctx.executors
        group = run_pipeline(ctx, in_group, steps, StoreKind.memory())
        counts = [len(group)]
        if src_count > 1:
            gathered = ctx.comm.gather(0, serialize_value(len(group)))
            blob = serialize_value([deserialize_value(b) for b in gathered]) \
                if ctx.rank == 0 else None
            counts = deserialize_value(ctx.comm.broadcast(0, blob))
        base = sum(counts[: ctx.rank])
        total = sum(counts)
        shipments = [[] for _ in range(inter.size)]
        for j, part in enumerate(group):
            g = base + j
            target = src_count + rank_of_partition(g, total, dst_count)
            shipments[target].append((g, partition_bytes(part, level=0)))
        outboxes = [serialize_value(s) for s in shipments]
        inter.alltoall(outboxes)

    def _import_recv(self, ctx, input_spec):
        inter = self.comms.get(input_spec[1])
        if inter is None:
            raise IgnisError("inter-worker communicator not built")
        outboxes = [serialize_value([]) for _ in range(inter.size)]
        received = inter.alltoall(outboxes)
        parts = []
        for blob in received:
            for g, container in deserialize_value(blob):
                values, _ = container_values(container)
                parts.append((g, values))
        parts.sort(key=lambda pair: pair[0])
        group = PartitionGroup()
        for _, values in parts:
            group.add(new_partition_from_values(values, self.default_kind))
        return group

    def _call(self, ctx, terminal, in_group):
        src = SourceRef.from_value(terminal[1])
        void = bool(terminal[2])
        fn = resolve(src.kind, src.target, self.namespace)
        cctx = ctx.with_vars(src.params, state={})
        if fn.arity == 0:
            out = fn(cctx)
        else:
            out = fn(cctx, in_group.elements())
        if void:
            return None, None
        items = list(out) if out is not None else []
        return PartitionGroup([new_partition_from_values(items, self.default_kind)]), None

    def _iterate(self, ctx, terminal, in_group):
        body_src, conv_src, final_src, iterations, epsilon, cap = terminal[1:]
        body = self._bound(body_src)
        conv = self._bound(conv_src) if conv_src is not None else None
        final = self._bound(final_src) if final_src is not None else None
        cctx = ctx.with_vars(SourceRef.from_value(body_src).params, state={})
        elems = list(in_group.elements())
        scalars = []
        ran = 0
        limit = int(cap) if iterations is None else min(int(iterations), int(cap))
        converged = False
        while ran < limit:
            elems = list(body(cctx, elems))
            ran += 1
            if conv is not None:
                local = conv(cctx, elems)
                total = cctx.comm.allreduce(local, lambda a, b: a + b) \
                    if ctx.executors > 1 else local
                scalars.append(total)
                if epsilon is not None and total <= epsilon:
                    converged = True
                    break
        if iterations is None and not converged:
            raise IgnisError(f"loop did not converge within {limit} iterations")
        if final is not None:
            elems = list(final(cctx, elems))
            out_group = PartitionGroup([new_partition_from_values(elems, self.default_kind)])
        elif ran == 0:
            out_group = in_group
        else:
            out_group = PartitionGroup([new_partition_from_values(elems, self.default_kind)])
        return out_group, [ran, scalars]

    def _replicate(self, ctx, node_id, group):
        """Ring replication: ship this share to rank+1, keep rank-1's copy."""
        comm = ctx.comm
        containers = [partition_bytes(p) for p in group]
        comm.send((self.rank + 1) % self.executors, serialize_value(containers))
        blob = comm.recv((self.rank - 1) % self.executors)
        self.replicas[node_id] = list(deserialize_value(blob))

    def _metrics_value(self):
        m = dict(self.metrics)
        m["pid"] = os.getpid()
        m["slots"] = sorted(self.slots)
        m["replicas"] = sorted(self.replicas)
        return [(k, m[k]) for k in sorted(m)]


class _BoundFn:
    """A resolved user function with its captured variables pre-bound."""

    __slots__ = ("fn", "variables")

    def __init__(self, fn, variables):
        self.fn = fn
        self.variables = dict(variables)

    def __call__(self, ctx, *args):
        bound = ctx.with_vars(self.variables) if self.variables else ctx
        return self.fn(bound, *args)


def _watch_parent(parent_pid):
    while True:
        time.sleep(2.0)
        if os.getppid() != parent_pid:
            os._exit(1)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="ignis-agent")
    parser.add_argument("--driver-host", required=True)
    parser.add_argument("--driver-port", type=int, required=True)
    parser.add_argument("--worker", required=True)
    parser.add_argument("--rank", type=int, required=True)
    parser.add_argument("--executors", type=int, required=True)
    parser.add_argument("--namespace", default="")
    parser.add_argument("--cursor", type=int, default=0)
    parser.add_argument("--avoid", default="", help="ports never to bind (comma-separated)")
    parser.add_argument("--props", required=True)
    args = parser.parse_args(argv)

    props = Properties(json.loads(base64.b64decode(args.props)))
    avoid = {int(p) for p in args.avoid.split(",") if p}
    ports = [p for p in props.ports() if p not in avoid] or props.ports()
    rotated = ports[args.cursor % len(ports):] + ports[: args.cursor % len(ports)]
    endpoint = Endpoint("127.0.0.1", ports=rotated)

    watchdog = threading.Thread(target=_watch_parent, args=(os.getppid(),), daemon=True)
    watchdog.start()

    agent = Agent(endpoint, args.worker, args.rank, args.executors, args.namespace,
                  props, (args.driver_host, args.driver_port))
    endpoint.send(
        agent.driver_ident, 0, 0, 0, OP_CTRL, 0,  # control event (seq 0): hello
        serialize_value(["hello", args.worker, args.rank, endpoint.host, endpoint.port,
                         os.getpid()]),
        timeout=props.get_float("ignis.transport.connectTimeout"),
    )
    try:
        agent.run()
    finally:
        endpoint.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
